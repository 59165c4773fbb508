"""Pretext windows, fixed-length clips and P x K batch sampling."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import NotEnoughData, SequenceTooShort
from .index import DatasetIndex, GaitSequence

PAD_POLICIES = ("error", "loop")


@dataclass(frozen=True)
class PretextSample:
    online_frames: np.ndarray  # (k, H, W)
    target_frame: np.ndarray  # (H, W)
    start: int = 0

    @property
    def k(self) -> int:
        return len(self.online_frames)


@dataclass(frozen=True)
class TrainingBatch:
    """P identities x K samples, stored as stacked arrays.

    ``frames`` is (P*K, k, H, W); ``target`` is (P*K, H, W) for pretext
    batches and ``None`` for labelled clips.  Rows are grouped by identity.
    """

    labels: tuple[str, ...]
    frames: np.ndarray
    target: np.ndarray | None = None

    @property
    def persons(self) -> list[str]:
        return list(dict.fromkeys(self.labels))

    @property
    def sequences_per_person(self) -> int:
        return len(self.labels) // max(1, len(self.persons))

    def __len__(self) -> int:
        return len(self.labels)


def loop_pad(frames: np.ndarray, length: int) -> np.ndarray:
    """Repeat the sequence cyclically until it has ``length`` frames."""
    if len(frames) == 0:
        raise SequenceTooShort("cannot loop-pad an empty sequence")
    if len(frames) >= length:
        return frames
    reps = -(-length // len(frames))
    return np.concatenate([frames] * reps)[:length]


def _window(frames: np.ndarray, length: int, rng: np.random.Generator | None, pad: str) -> tuple[np.ndarray, int]:
    if pad not in PAD_POLICIES:
        raise ValueError(f"pad must be one of {PAD_POLICIES}")
    if len(frames) < length:
        if pad == "error":
            raise SequenceTooShort(f"need {length} frames, sequence has {len(frames)}")
        frames = loop_pad(frames, length)
    slack = len(frames) - length
    start = 0 if slack == 0 or rng is None else int(rng.integers(0, slack + 1))
    return frames[start:start + length], start


def make_pretext_sample(seq: GaitSequence | np.ndarray, k: int = 30,
                        rng: np.random.Generator | None = None, pad: str = "error") -> PretextSample:
    """Cut a contiguous window of k + 1 frames: k online frames, then the target."""
    frames = seq.frames() if isinstance(seq, GaitSequence) else np.asarray(seq)
    win, start = _window(frames, k + 1, rng, pad)
    return PretextSample(win[:k], win[k], start)


def make_clip(seq: GaitSequence | np.ndarray, length: int,
              rng: np.random.Generator | None = None, pad: str = "loop") -> np.ndarray:
    frames = seq.frames() if isinstance(seq, GaitSequence) else np.asarray(seq)
    return _window(frames, length, rng, pad)[0]


def sample_training_batch(index: DatasetIndex, P: int, K: int, k: int, rng: np.random.Generator,
                          kind: str = "pretext", pad: str = "error") -> TrainingBatch:
    """Draw P identities and K sequences of each, without replacement.

    ``kind="pretext"`` yields k online frames plus a target frame per sample;
    ``kind="clip"`` yields labelled k-frame clips for metric learning.
    """
    need = k + 1 if kind == "pretext" else k
    usable: dict[str, list[GaitSequence]] = {}
    for ident, seqs in index.by_identity().items():
        ok = [s for s in seqs if len(s) >= need or (pad == "loop" and len(s) > 0)]
        if len(ok) >= K:
            usable[ident] = ok
    if len(usable) < P:
        raise NotEnoughData(
            f"need {P} identities with >= {K} sequences of >= {need} frames, found {len(usable)}")

    idents = sorted(usable)
    chosen = rng.choice(len(idents), size=P, replace=False)
    labels, clips, targets = [], [], []
    for i in chosen:
        ident = idents[int(i)]
        pool = usable[ident]
        for j in rng.choice(len(pool), size=K, replace=False):
            seq = pool[int(j)]
            labels.append(ident)
            if kind == "pretext":
                sample = make_pretext_sample(seq, k, rng, pad)
                clips.append(sample.online_frames)
                targets.append(sample.target_frame)
            else:
                clips.append(make_clip(seq, k, rng, pad))
    frames = np.stack(clips).astype(np.float32, copy=False)
    target = np.stack(targets).astype(np.float32, copy=False) if targets else None
    return TrainingBatch(tuple(labels), frames, target)


def select_fraction(index: DatasetIndex, fraction: float, mode: str = "identity",
                    rng: np.random.Generator | None = None) -> DatasetIndex:
    """Keep a fraction of the labelled data, by whole identities or by sequences.

    Selection is by sorted order when ``rng`` is None, otherwise random.
    """
    if not 0 < fraction <= 1:
        raise ValueError("fraction must be in (0, 1]")
    if fraction == 1:
        return index
    if mode == "identity":
        ids = index.identities
        n = max(2, int(round(fraction * len(ids))))
        pick = ids[:n] if rng is None else [ids[i] for i in sorted(rng.choice(len(ids), n, replace=False))]
        return index.subset(pick)
    if mode == "sequence":
        # fraction of (identity, condition, sequence) groups, all views kept together
        groups = sorted({(s.identity, s.condition, s.sequence_index) for s in index})
        n = max(1, int(round(fraction * len(groups))))
        if rng is None:
            keep = set(groups[:n])
        else:
            keep = {groups[i] for i in rng.choice(len(groups), n, replace=False)}
        return DatasetIndex(
            tuple(s for s in index if (s.identity, s.condition, s.sequence_index) in keep), index.warnings)
    raise ValueError(f"unknown fraction mode {mode!r}")


def limit_sequences(index: DatasetIndex, max_sequences: int) -> DatasetIndex:
    """Cap the number of sequences (the pre-training set size knob). 0 = no cap."""
    if max_sequences <= 0 or max_sequences >= len(index):
        return index
    ordered = sorted(index.sequences, key=lambda s: s.key)
    return DatasetIndex(tuple(ordered[:max_sequences]), index.warnings)
