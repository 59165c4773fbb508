"""Procedural walking-figure silhouettes for desk-scale experiments.

Each identity owns a fixed set of body and gait parameters; every sequence
renders that figure walking, so identity is recoverable from shape and
motion while view and clothing act as nuisance factors.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .index import DatasetIndex, GaitSequence
from .silhouette import FRAME_HEIGHT, FRAME_WIDTH

_FOOT_Y = 61.0
_TOP_Y = 2.0


@dataclass(frozen=True)
class GaitParams:
    leg_frac: float  # leg length / body height
    torso_half_width: float
    head_radius: float
    swing: float  # hip swing amplitude, radians
    period: float  # frames per gait cycle
    arm_swing: float
    limb_radius: float
    knee_bend: float
    lean: float

    @classmethod
    def sample(cls, rng: np.random.Generator) -> "GaitParams":
        return cls(
            leg_frac=rng.uniform(0.42, 0.56),
            torso_half_width=rng.uniform(2.8, 5.8),
            head_radius=rng.uniform(3.2, 5.6),
            swing=rng.uniform(0.22, 0.62),
            period=rng.uniform(9.0, 19.0),
            arm_swing=rng.uniform(0.1, 0.7),
            limb_radius=rng.uniform(1.3, 2.7),
            knee_bend=rng.uniform(0.05, 0.7),
            lean=rng.uniform(-0.1, 0.14),
        )


def _capsule(yy, xx, p0, p1, radius):
    (y0, x0), (y1, x1) = p0, p1
    dy, dx = y1 - y0, x1 - x0
    denom = dy * dy + dx * dx
    t = np.clip(((yy - y0) * dy + (xx - x0) * dx) / denom, 0.0, 1.0) if denom > 0 else 0.0
    d = np.hypot(yy - (y0 + t * dy), xx - (x0 + t * dx))
    return np.clip(radius - d + 0.5, 0.0, 1.0)


def _ellipse(yy, xx, center, ry, rx):
    cy, cx = center
    r = np.hypot((yy - cy) / ry, (xx - cx) / rx)
    # signed distance approximation scaled by the smaller semi-axis
    return np.clip((1.0 - r) * min(ry, rx) + 0.5, 0.0, 1.0)


def _view_transform(view_deg: float) -> tuple[float, float]:
    th = np.deg2rad(view_deg)
    scale = 0.62 + 0.38 * abs(np.sin(th))
    shear = 0.12 * np.cos(th)
    return scale, shear


def render_frame(p: GaitParams, t: float, phase: float, view: float, condition: str,
                 x_offset: float = 0.0) -> np.ndarray:
    """Render one 64x44 silhouette with soft edges in [0, 1]."""
    H, W = FRAME_HEIGHT, FRAME_WIDTH
    cx, cy = W / 2.0 - 0.5 + x_offset, H / 2.0
    scale, shear = _view_transform(view)
    yy, out_x = np.mgrid[0:H, 0:W].astype(np.float64)
    # back-project output pixels into the canonical (side-on) drawing plane
    xx = cx + (out_x - cx - shear * (yy - cy)) / scale

    height = _FOOT_Y - _TOP_Y
    leg = p.leg_frac * height
    hip = (_FOOT_Y - leg, cx)
    head_c = (_TOP_Y + p.head_radius, cx + p.lean * 10)
    neck = (_TOP_Y + 2 * p.head_radius, cx + p.lean * 8)
    torso_w = p.torso_half_width * (1.6 if condition == "CL" else 1.0)
    torso_bottom = hip[0] + (6.0 if condition == "CL" else 1.0)

    ph = 2 * np.pi * t / p.period + phase
    shapes = [
        _ellipse(yy, xx, head_c, p.head_radius, p.head_radius),
        _ellipse(yy, xx, ((neck[0] + torso_bottom) / 2, (neck[1] + hip[1]) / 2),
                 (torso_bottom - neck[0]) / 2 + 0.5, torso_w),
    ]
    for sign in (1.0, -1.0):
        a = sign * p.swing * np.sin(ph)
        knee_a = a - p.knee_bend * 0.5 * (1 + np.sin(ph + sign * np.pi / 2))
        knee = (hip[0] + 0.5 * leg * np.cos(a), hip[1] + 0.5 * leg * np.sin(a))
        foot = (knee[0] + 0.5 * leg * np.cos(knee_a), knee[1] + 0.5 * leg * np.sin(knee_a))
        shapes.append(_capsule(yy, xx, hip, knee, p.limb_radius))
        shapes.append(_capsule(yy, xx, knee, foot, p.limb_radius))
        arm_len = 0.85 * (hip[0] - neck[0])
        b = -sign * p.arm_swing * np.sin(ph)
        shoulder = (neck[0] + 2.0, neck[1])
        hand = (shoulder[0] + arm_len * np.cos(b), shoulder[1] + arm_len * np.sin(b))
        shapes.append(_capsule(yy, xx, shoulder, hand, 0.8 * p.limb_radius))
    if condition == "BG":
        shapes.append(_ellipse(yy, xx, (hip[0] - 5.0, hip[1] + torso_w + 2.5), 5.0, 3.2))
    img = np.max(shapes, axis=0)
    # quantise to the 8-bit grid so that frames survive a PNG round trip exactly
    return (np.rint(img * 255.0) / 255.0).astype(np.float32)


def generate_synthetic_dataset(n_identities: int = 8, sequences_per_identity: int = 4,
                               views: Sequence[int] = (0, 90), conditions: Sequence[str] = ("NM",),
                               frames_per_sequence: int = 40, seed: int = 0) -> DatasetIndex:
    """Build an in-memory dataset; identical arguments give bit-identical pixels.

    ``sequences_per_identity`` counts sequences per condition, numbered from
    1 as in CASIA-B (``nm-01`` ...).  All views of one sequence share the same
    walk, mirroring synchronised multi-camera capture.
    """
    for name, v in (("n_identities", n_identities), ("sequences_per_identity", sequences_per_identity),
                    ("frames_per_sequence", frames_per_sequence), ("views", len(views)),
                    ("conditions", len(conditions))):
        if v < 1:
            raise ValueError(f"{name} must be >= 1")
    seqs = []
    for i in range(n_identities):
        ident = f"{i + 1:03d}"
        params = GaitParams.sample(np.random.default_rng([seed, 0, i]))
        for ci, cond in enumerate(conditions):
            for s in range(sequences_per_identity):
                rng = np.random.default_rng([seed, 1, i, ci, s])
                phase = rng.uniform(0, 2 * np.pi)
                x_off = rng.uniform(-0.5, 0.5)
                for view in views:
                    frames = np.stack([
                        render_frame(params, t, phase, view, cond, x_off)
                        for t in range(frames_per_sequence)
                    ])
                    frames.setflags(write=False)
                    seqs.append(GaitSequence(ident, int(view), cond, s + 1, data=frames))
    return DatasetIndex(tuple(seqs))
