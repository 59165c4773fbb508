"""Self-supervised pre-training with an online and a momentum target branch.

The online branch sees k consecutive frames and must predict what the
target branch produces from the single frame that follows them::

    online:  frames[0:k] -> Backbone -> Projection -> Predictor -> y_on
    target:  frames[k]   -> FrameEncoder' -> FCBins (shared) -> Projection' -> y_tar

The target encoder and projection track the online ones by EMA; the FC bins
are one parameter block used by both branches.
"""
from __future__ import annotations

import copy
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import Backbone, BackboneConfig, FrameEncoder, StripeLinear
from .checkpoint import save_checkpoint
from .data import DatasetIndex, TrainingBatch, sample_training_batch
from .errors import DegenerateNorm, NonFiniteLoss
from .rng import stream, torch_stream

logger = logging.getLogger(__name__)

NORM_FLOOR = 1e-12


class Projection(nn.Module):
    """Per-stripe kernel-1 conv (d1 -> d2), batch norm over the batch axis, ReLU.

    Normalising before the rectifier keeps every unit active on some samples;
    with the rectifier first, units that are off for the whole batch come out
    of the norm as constants.
    """

    def __init__(self, n: int, d1: int, d2: int, batch_norm: bool = True):
        super().__init__()
        self.n, self.d2 = n, d2
        self.conv = StripeLinear(n, d1, d2)
        self.bn = nn.BatchNorm1d(n * d2) if batch_norm else None

    def pre_norm(self, z: torch.Tensor) -> torch.Tensor:
        return self.conv(z)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        h = self.pre_norm(z)
        if self.bn is None:
            return F.relu(h)
        B = h.shape[0]
        flat = h.reshape(B, -1)
        bn = self.bn
        # batch statistics are undefined for a single sample; fall back to running stats
        use_batch = bn.training and B > 1
        out = F.batch_norm(flat, bn.running_mean, bn.running_var, bn.weight, bn.bias,
                           training=use_batch, momentum=bn.momentum, eps=bn.eps)
        if use_batch:
            bn.num_batches_tracked += 1
        return F.relu(out).reshape(B, self.n, self.d2)


class OnlineNetwork(nn.Module):
    def __init__(self, backbone_cfg: BackboneConfig, d2: int = 256, batch_norm: bool = True):
        super().__init__()
        self.backbone = Backbone(backbone_cfg)
        n = backbone_cfg.n
        self.projection = Projection(n, backbone_cfg.d1, d2, batch_norm)
        self.predictor = StripeLinear(n, d2, d2)

    def forward(self, frames: torch.Tensor) -> torch.Tensor:
        """(B, k, H, W) -> (B, n, d2)."""
        return self.predictor(self.projection(self.backbone(frames)))


class TargetNetwork(nn.Module):
    """Copies of the online frame encoder and projection, plus borrowed FC bins.

    With ``share_fc_bins`` the online bins are held by reference and kept out
    of this module's parameters and state dict; otherwise the target gets its
    own EMA-tracked copy.
    """

    def __init__(self, online: OnlineNetwork, share_fc_bins: bool = True):
        super().__init__()
        self.encoder: FrameEncoder = copy.deepcopy(online.backbone.encoder)
        self.projection: Projection = copy.deepcopy(online.projection)
        self.share_fc_bins = share_fc_bins
        if share_fc_bins:
            object.__setattr__(self, "fc_bins", online.backbone.fc_bins)
        else:
            self.fc_bins = copy.deepcopy(online.backbone.fc_bins)
        for p in self.parameters():
            p.requires_grad_(False)

    def spatial(self, frame: torch.Tensor) -> torch.Tensor:
        return self.fc_bins(self.encoder(frame))

    @torch.no_grad()
    def forward(self, frame: torch.Tensor) -> torch.Tensor:
        """(B, H, W) -> (B, n, d2); never builds an autograd graph."""
        return self.projection(self.spatial(frame))


def build_networks(backbone_cfg: BackboneConfig, d2: int = 256, seed: int = 0,
                   share_fc_bins: bool = True, batch_norm: bool = True) -> tuple[OnlineNetwork, TargetNetwork]:
    """Initialise the online branch from the ``init`` stream; the target starts as its copy."""
    with torch_stream(seed, "init"):
        online = OnlineNetwork(backbone_cfg, d2, batch_norm)
    return online, TargetNetwork(online, share_fc_bins)


def stripe_cosine(y_on: torch.Tensor, y_tar: torch.Tensor) -> torch.Tensor:
    """Cosine similarity of matching rows: (..., n, d) x (..., n, d) -> (..., n)."""
    if y_on.shape != y_tar.shape:
        raise ValueError(f"shape mismatch {tuple(y_on.shape)} vs {tuple(y_tar.shape)}")
    n_on = torch.linalg.vector_norm(y_on, dim=-1)
    n_tar = torch.linalg.vector_norm(y_tar, dim=-1)
    if bool((n_on < NORM_FLOOR).any()) or bool((n_tar < NORM_FLOOR).any()):
        raise DegenerateNorm(
            f"row norm below {NORM_FLOOR}: min online {n_on.min().item():.3e}, "
            f"min target {n_tar.min().item():.3e} (representation collapse?)")
    return (y_on * y_tar).sum(-1) / (n_on * n_tar)


def cosine_loss(y_on: torch.Tensor, y_tar: torch.Tensor) -> torch.Tensor:
    """Negative cosine similarity averaged over stripes (and any batch dims); in [-1, 1]."""
    return -stripe_cosine(y_on, y_tar).mean()


@torch.no_grad()
def ema_update(target: TargetNetwork, online: OnlineNetwork, tau: float) -> None:
    """target <- tau * target + (1 - tau) * online, for encoder and projection.

    Buffers (batch-norm running statistics) are copied.  Shared FC bins are
    left alone; an unshared copy is averaged like the rest.
    """
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau must lie in [0, 1], got {tau}")
    pairs = [(target.encoder, online.backbone.encoder), (target.projection, online.projection)]
    if not target.share_fc_bins:
        pairs.append((target.fc_bins, online.backbone.fc_bins))
    for tgt, src in pairs:
        t_params, s_params = dict(tgt.named_parameters()), dict(src.named_parameters())
        if t_params.keys() != s_params.keys():
            raise ValueError("online/target parameter sets differ")
        for name, tp in t_params.items():
            sp = s_params[name]
            if tp.shape != sp.shape:
                raise ValueError(f"{name}: shape {tuple(tp.shape)} vs {tuple(sp.shape)}")
            tp.mul_(tau).add_(sp, alpha=1.0 - tau)
        for (_, tb), (_, sb) in zip(tgt.named_buffers(), src.named_buffers()):
            tb.copy_(sb)


@dataclass
class PretrainConfig:
    lr: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    iterations: int = 1000
    P: int = 8
    K: int = 2
    k: int = 30
    tau: float = 0.99
    d2: int = 256
    seed: int = 0
    share_fc_bins: bool = True
    batch_norm: bool = True
    log_every: int = 1
    checkpoint_every: int = 0  # 0 disables periodic checkpoints

    def __post_init__(self):
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError("tau must lie in [0, 1]")
        if self.d2 < 1 or self.k < 1 or self.P < 1 or self.K < 1:
            raise ValueError("d2, k, P and K must be positive")


@dataclass
class StepStats:
    loss: float
    similarity: float
    y_tar_std_min: float


def batch_tensors(batch: TrainingBatch, dtype=torch.float32, device=None) -> tuple[torch.Tensor, torch.Tensor | None]:
    frames = torch.from_numpy(np.ascontiguousarray(batch.frames)).to(device=device, dtype=dtype)
    target = None
    if batch.target is not None:
        target = torch.from_numpy(np.ascontiguousarray(batch.target)).to(device=device, dtype=dtype)
    return frames, target


def pretrain_step(batch: TrainingBatch, online: OnlineNetwork, target: TargetNetwork,
                  optimizer: torch.optim.Optimizer, tau: float) -> StepStats:
    """One Adam step on the online branch followed by the EMA target update."""
    ref = next(online.parameters())
    frames, target_frame = batch_tensors(batch, ref.dtype, ref.device)
    online.train()
    target.train()
    y_tar = target(target_frame)
    y_on = online(frames)
    sim = stripe_cosine(y_on, y_tar)
    loss = -sim.mean()
    if not torch.isfinite(loss):
        raise NonFiniteLoss(f"pre-training loss is {loss.item()}")
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    optimizer.step()
    ema_update(target, online, tau)
    y_std = y_tar.reshape(len(y_tar), -1).std(dim=0).min().item() if len(y_tar) > 1 else float("nan")
    return StepStats(loss.item(), sim.mean().item(), y_std)


@torch.no_grad()
def measure_similarity(batch: TrainingBatch, online: OnlineNetwork, target: TargetNetwork) -> tuple[float, float]:
    """Mean per-stripe cosine between branches on ``batch`` with batch-statistics BN.

    Returns (similarity, min across-batch std of y_tar); running statistics are
    left untouched.
    """
    ref = next(online.parameters())
    frames, target_frame = batch_tensors(batch, ref.dtype, ref.device)
    saved = [copy.deepcopy(m.projection.bn.state_dict()) for m in (online, target) if m.projection.bn is not None]
    online.train()
    target.train()
    y_tar = target(target_frame)
    y_on = online(frames)
    for m, s in zip([m for m in (online, target) if m.projection.bn is not None], saved):
        m.projection.bn.load_state_dict(s)
    std = y_tar.reshape(len(y_tar), -1).std(dim=0).min().item()
    return stripe_cosine(y_on, y_tar).mean().item(), std


LOG_HEADER = "step,loss,y_tar_std_min,wallclock"


@dataclass
class PretrainResult:
    online: OnlineNetwork
    target: TargetNetwork
    history: list[StepStats] = field(default_factory=list)
    steps: int = 0


def make_optimizer(params, lr: float, betas=(0.9, 0.999)) -> torch.optim.Adam:
    return torch.optim.Adam(params, lr=lr, betas=betas)


def pretrain(index: DatasetIndex, backbone_cfg: BackboneConfig, cfg: PretrainConfig,
             out_dir: str | Path | None = None, log_file=None,
             networks: tuple[OnlineNetwork, TargetNetwork] | None = None,
             extra_meta: dict | None = None) -> PretrainResult:
    """Run ``cfg.iterations`` pre-training steps.

    With ``out_dir`` set, periodic and final checkpoints are written there; on
    a non-finite loss the current state is dumped to ``nonfinite.ckpt`` before
    the error propagates.  ``log_file`` receives CSV rows.
    """
    online, target = networks or build_networks(backbone_cfg, cfg.d2, cfg.seed, cfg.share_fc_bins, cfg.batch_norm)
    opt = make_optimizer(online.parameters(), cfg.lr, cfg.betas)
    rng = stream(cfg.seed, "sampling")
    result = PretrainResult(online, target)
    meta = {"backbone": backbone_cfg.to_dict(), "pretrain": _jsonable(asdict(cfg)), **(extra_meta or {})}
    out = Path(out_dir) if out_dir is not None else None
    t0 = time.perf_counter()
    if log_file is not None:
        print(LOG_HEADER, file=log_file, flush=True)
    for step in range(1, cfg.iterations + 1):
        batch = sample_training_batch(index, cfg.P, cfg.K, cfg.k, rng, kind="pretext")
        try:
            stats = pretrain_step(batch, online, target, opt, cfg.tau)
        except NonFiniteLoss:
            if out is not None:
                save_pretrain_checkpoint(out / "nonfinite.ckpt", online, target, meta, step)
            raise
        result.history.append(stats)
        result.steps = step
        if log_file is not None and (step % cfg.log_every == 0 or step == cfg.iterations):
            print(f"{step},{stats.loss:.8f},{stats.y_tar_std_min:.6g},{time.perf_counter() - t0:.3f}",
                  file=log_file, flush=True)
        if out is not None and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
            save_pretrain_checkpoint(out / f"pretrain_{step:06d}.ckpt", online, target, meta, step)
    if out is not None:
        save_pretrain_checkpoint(out / "pretrain_final.ckpt", online, target, meta, result.steps)
    return result


def save_pretrain_checkpoint(path, online: OnlineNetwork, target: TargetNetwork, config: dict, step: int):
    return save_checkpoint(path, {"online": online, "target": target},
                           config=config, step=step, phase="pretrain")


def _jsonable(d: dict) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}
