"""Metric-learning fine-tuning of the backbone with the batch-all triplet loss."""
from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .backbone import Backbone, BackboneConfig
from .checkpoint import Checkpoint, restore_module, save_checkpoint
from .data import DatasetIndex, TrainingBatch, loop_pad, sample_training_batch
from .errors import DegenerateBatch, NonFiniteLoss, ShapeMismatch
from .rng import stream, torch_stream


def stripe_distance(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Mean over stripes of the Euclidean distance between matching rows."""
    if a.shape != b.shape:
        raise ShapeMismatch(f"{tuple(a.shape)} vs {tuple(b.shape)}")
    return torch.linalg.vector_norm(a - b, dim=-1).mean(-1)


def pairwise_stripe_distance(x: torch.Tensor, y: torch.Tensor | None = None) -> torch.Tensor:
    """(N, n, d) x (M, n, d) -> (N, M) matrix of :func:`stripe_distance`."""
    y = x if y is None else y
    if x.shape[1:] != y.shape[1:]:
        raise ShapeMismatch(f"{tuple(x.shape)} vs {tuple(y.shape)}")
    return torch.linalg.vector_norm(x[:, None] - y[None], dim=-1).mean(-1)


def _label_codes(labels: Sequence) -> torch.Tensor:
    _, codes = np.unique(np.asarray(labels, dtype=object).astype(str), return_inverse=True)
    return torch.from_numpy(codes.reshape(-1))


def triplet_mask(labels: Sequence) -> torch.Tensor:
    """Boolean (B, B, B) mask of valid (anchor, positive, negative) index triples."""
    codes = _label_codes(labels)
    same = codes[:, None] == codes[None, :]
    pos = same & ~torch.eye(len(codes), dtype=torch.bool)
    neg = ~same
    return pos[:, :, None] & neg[:, None, :]


def enumerate_triplets(labels: Sequence) -> torch.Tensor:
    """(T, 3) tensor of every valid triple, in lexicographic order."""
    return torch.nonzero(triplet_mask(labels))


def check_batch_structure(labels: Sequence) -> None:
    _, counts = np.unique(np.asarray(labels, dtype=object).astype(str), return_counts=True)
    if len(counts) < 2 or counts.min() < 2:
        raise DegenerateBatch(
            f"batch-all triplets need >= 2 identities with >= 2 samples each; got counts {counts.tolist()}")


@dataclass
class TripletStats:
    loss: float
    triplets: int
    active: int


def triplet_loss_ba(embeddings: torch.Tensor, labels: Sequence, margin: float = 0.2,
                    return_stats: bool = False):
    """Batch-all triplet loss averaged over the non-zero hinge terms.

    Every anchor/positive/negative triple in the batch contributes
    ``relu(margin + D(a, p) - D(a, n))``; the loss is the mean over the terms
    that are positive, or zero when none are.
    """
    if margin <= 0:
        raise ValueError("margin must be positive")
    check_batch_structure(labels)
    if embeddings.shape[0] != len(labels):
        raise ShapeMismatch(f"{embeddings.shape[0]} embeddings for {len(labels)} labels")
    dist = pairwise_stripe_distance(embeddings)
    mask = triplet_mask(labels)
    hinge = torch.relu(margin + dist[:, :, None] - dist[:, None, :])
    terms = hinge[mask]
    active = terms > 0
    n_active = int(active.sum())
    loss = terms.sum() / n_active if n_active else terms.sum() * 0.0
    if return_stats:
        return loss, TripletStats(loss.item(), int(mask.sum()), n_active)
    return loss


@torch.no_grad()
def embed_sequence(frames, backbone: Backbone, min_frames: int | None = None) -> torch.Tensor:
    """Embed a whole sequence, loop-padding it up to the temporal window if short.

    Returns an (n, d1) float64 tensor.
    """
    arr = np.array(frames, dtype=np.float32)
    need = min_frames or 2 * backbone.cfg.radius + 1
    if len(arr) < need:
        arr = loop_pad(arr, need)
    ref = next(backbone.parameters())
    was_training = backbone.training
    backbone.eval()
    try:
        z = backbone(torch.from_numpy(np.ascontiguousarray(arr))[None].to(device=ref.device, dtype=ref.dtype))[0]
    finally:
        backbone.train(was_training)
    return z.to(device="cpu", dtype=torch.float64)


@dataclass
class FinetuneConfig:
    lr: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    iterations: int = 1000
    P: int = 8
    K: int = 2
    k: int = 30
    margin: float = 0.2
    seed: int = 0
    log_every: int = 1
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.margin <= 0:
            raise ValueError("margin must be positive")
        if self.P < 2 or self.K < 2:
            raise ValueError("batch-all triplets need P >= 2 and K >= 2")


def finetune_step(batch: TrainingBatch, backbone: Backbone, optimizer: torch.optim.Optimizer,
                  margin: float) -> TripletStats:
    ref = next(backbone.parameters())
    frames = torch.from_numpy(np.ascontiguousarray(batch.frames)).to(device=ref.device, dtype=ref.dtype)
    backbone.train()
    loss, stats = triplet_loss_ba(backbone(frames), batch.labels, margin, return_stats=True)
    if not torch.isfinite(loss):
        raise NonFiniteLoss(f"triplet loss is {loss.item()}")
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    optimizer.step()
    return stats


def build_backbone(cfg: BackboneConfig, seed: int = 0) -> Backbone:
    """Fresh backbone drawn from the same ``init`` stream as the pre-training networks."""
    from .pretrain import build_networks  # the online branch owns the canonical init order

    online, _ = build_networks(cfg, seed=seed)
    return online.backbone


def backbone_from_checkpoint(ckpt: Checkpoint, cfg: BackboneConfig | None = None) -> Backbone:
    """Rebuild the backbone stored in a pre-training or fine-tuning checkpoint."""
    stored = BackboneConfig(**ckpt.config["backbone"])
    if cfg is not None and cfg != stored:
        raise ShapeMismatch(f"checkpoint backbone {stored} does not match requested {cfg}")
    prefix = "online.backbone" if ckpt.phase == "pretrain" else "backbone"
    with torch_stream(0, "restore"):
        backbone = Backbone(stored)
    restore_module(backbone, ckpt.module_state(prefix))
    return backbone


LOG_HEADER = "step,loss,active_triplets,wallclock"


@dataclass
class FinetuneResult:
    backbone: Backbone
    history: list[TripletStats] = field(default_factory=list)

    def first_step_below(self, threshold: float) -> int | None:
        for i, h in enumerate(self.history, 1):
            if h.loss < threshold:
                return i
        return None


def finetune(index: DatasetIndex, backbone: Backbone, cfg: FinetuneConfig,
             out_dir: str | Path | None = None, log_file=None, extra_meta: dict | None = None) -> FinetuneResult:
    """Fine-tune ``backbone`` in place for ``cfg.iterations`` P x K batches."""
    opt = torch.optim.Adam(backbone.parameters(), lr=cfg.lr, betas=cfg.betas)
    rng = stream(cfg.seed, "finetune-sampling")
    meta = {"backbone": backbone.cfg.to_dict(),
            "finetune": {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(cfg).items()},
            **(extra_meta or {})}
    out = Path(out_dir) if out_dir is not None else None
    result = FinetuneResult(backbone)
    if log_file is not None:
        print(LOG_HEADER, file=log_file, flush=True)
    t0 = time.perf_counter()
    for step in range(1, cfg.iterations + 1):
        batch = sample_training_batch(index, cfg.P, cfg.K, cfg.k, rng, kind="clip", pad="loop")
        try:
            stats = finetune_step(batch, backbone, opt, cfg.margin)
        except NonFiniteLoss:
            if out is not None:
                save_finetune_checkpoint(out / "nonfinite.ckpt", backbone, meta, step)
            raise
        result.history.append(stats)
        if log_file is not None and (step % cfg.log_every == 0 or step == cfg.iterations):
            print(f"{step},{stats.loss:.8f},{stats.active},{time.perf_counter() - t0:.3f}",
                  file=log_file, flush=True)
        if out is not None and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
            save_finetune_checkpoint(out / f"finetune_{step:06d}.ckpt", backbone, meta, step)
    if out is not None:
        save_finetune_checkpoint(out / "finetune_final.ckpt", backbone, meta, len(result.history))
    return result


def save_finetune_checkpoint(path, backbone: Backbone, config: dict, step: int):
    return save_checkpoint(path, {"backbone": backbone}, config=config, step=step, phase="finetune")
