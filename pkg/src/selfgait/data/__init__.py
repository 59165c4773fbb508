"""Silhouette data: alignment, dataset indexing, sampling and synthesis."""
from .index import (CASIA_B_VIEWS, CONDITIONS, OU_MVLP_VIEWS, DatasetIndex, GaitSequence,
                    LayoutWarning, index_casia_b, index_ou_mvlp, protocol_split, write_casia_b)
from .sampling import (PretextSample, TrainingBatch, limit_sequences, loop_pad, make_clip,
                       make_pretext_sample, sample_training_batch, select_fraction)
from .silhouette import FRAME_HEIGHT, FRAME_WIDTH, align_silhouette, read_frame, write_frame
from .synthetic import GaitParams, generate_synthetic_dataset, render_frame
