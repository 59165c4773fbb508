"""Cross-view rank-1 evaluation over gallery/probe protocols."""
from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
import torch

from .backbone import Backbone
from .data import DatasetIndex
from .errors import EvaluationError
from .finetune import embed_sequence

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Entry:
    embedding: np.ndarray  # (n, d1) float64
    identity: str
    view: int
    condition: str
    sequence_index: int = 0


@dataclass(frozen=True)
class Protocol:
    """Which (condition, sequence numbers) form the gallery and each probe set."""

    name: str
    gallery: tuple[str, tuple[int, ...]]
    probes: Mapping[str, tuple[str, tuple[int, ...]]]
    gallery_label: str
    orientation: str = "columns"  # probe views as table columns, or as rows


PROTOCOL_PRESETS = {
    "casia_b": Protocol(
        "casia_b", ("NM", (1, 2, 3, 4)),
        {"NM": ("NM", (5, 6)), "BG": ("BG", (1, 2)), "CL": ("CL", (1, 2))},
        "Gallery NM#1-4",
    ),
    "ou_mvlp": Protocol(
        "ou_mvlp", ("NM", (1,)), {"NM": ("NM", (0,))}, "Gallery all views, seq #01", orientation="rows",
    ),
}


@dataclass
class ProtocolSets:
    gallery: list[Entry]
    probes: dict[str, list[Entry]]
    warnings: list[str] = field(default_factory=list)


def build_protocol_sets(test_index: DatasetIndex, backbone: Backbone, protocol: str | Protocol = "casia_b",
                        train_identities: Iterable[str] = ()) -> ProtocolSets:
    """Embed every gallery and probe sequence of the test identities.

    A subject missing a probe condition is skipped for that probe set and
    reported in ``warnings`` (the MissingCondition case).
    """
    proto = PROTOCOL_PRESETS[protocol] if isinstance(protocol, str) else protocol
    if len(test_index) == 0:
        raise EvaluationError("test index is empty")
    overlap = set(train_identities) & set(test_index.identities)
    if overlap:
        raise EvaluationError(f"train and test identities overlap: {sorted(overlap)[:5]}")

    def select(cond, seq_nos):
        return [s for s in sorted(test_index.sequences, key=lambda s: s.key)
                if s.condition == cond and s.sequence_index in seq_nos]

    def embed(seqs):
        return [Entry(embed_sequence(s.frames(), backbone).numpy(), s.identity, s.view, s.condition,
                      s.sequence_index) for s in seqs if len(s) > 0]

    warnings = []
    gallery = embed(select(*proto.gallery))
    if not gallery:
        raise EvaluationError(f"no gallery sequences for {proto.gallery}")
    probes = {}
    ids = test_index.identities
    for name, (cond, seq_nos) in proto.probes.items():
        seqs = select(cond, seq_nos)
        have = {s.identity for s in seqs}
        missing = [i for i in ids if i not in have]
        if missing:
            warnings.append(f"MissingCondition: {len(missing)} subject(s) lack probe set {name} "
                            f"({cond} #{','.join(map(str, seq_nos))})")
        if seqs:
            probes[name] = embed(seqs)
    for w in warnings:
        logger.warning(w)
    return ProtocolSets(gallery, probes, warnings)


@dataclass
class EvalMatrix:
    condition: str
    probe_views: list[int]
    gallery_views: list[int]
    hits: np.ndarray  # (probe views, gallery views)
    attempts: np.ndarray
    excluded: np.ndarray  # bool, identical-view cells left out by protocol
    empty_gallery_views: list[int] = field(default_factory=list)

    @property
    def present(self) -> np.ndarray:
        return (self.attempts > 0) & ~self.excluded

    @property
    def accuracy(self) -> np.ndarray:
        acc = np.full(self.hits.shape, np.nan)
        ok = self.present
        acc[ok] = self.hits[ok] / self.attempts[ok]
        return acc

    @property
    def probe_view_means(self) -> np.ndarray:
        acc = self.accuracy
        out = np.full(len(self.probe_views), np.nan)
        for i, row in enumerate(acc):
            vals = row[~np.isnan(row)]
            if vals.size:
                out[i] = vals.mean()
        return out

    @property
    def mean(self) -> float:
        m = self.probe_view_means
        m = m[~np.isnan(m)]
        return float(m.mean()) if m.size else math.nan


def _stack(entries: Sequence[Entry]) -> np.ndarray:
    return np.stack([e.embedding for e in entries]).astype(np.float64)


def distance_rows(probe: np.ndarray, gallery: np.ndarray, chunk_elems: int = 4_000_000):
    """Yield (start, block) with block[i, j] = stripe distance of probe[start + i] to gallery[j]."""
    g = torch.from_numpy(gallery)
    per_row = max(1, gallery[0].size * len(gallery))
    step = max(1, chunk_elems // per_row)
    for start in range(0, len(probe), step):
        p = torch.from_numpy(probe[start:start + step])
        d = torch.linalg.vector_norm(p[:, None] - g[None], dim=-1).mean(-1)
        yield start, d.numpy()


def rank1_matrix(gallery: Sequence[Entry], probe: Sequence[Entry], exclude_identical_view: bool = True,
                 condition: str = "") -> EvalMatrix:
    """Rank-1 accuracy for every (probe view, gallery view) pair.

    For each probe and each admissible gallery view the nearest gallery entry
    of that view is found; ties go to the smallest (distance, identity,
    sequence index).  A hit means the identities agree.
    """
    if not gallery:
        raise EvaluationError("gallery is empty")
    if not probe:
        raise EvaluationError("probe set is empty")
    g_views = np.array([e.view for e in gallery])
    g_ids = np.array([e.identity for e in gallery])
    g_seq = np.array([e.sequence_index for e in gallery])
    # identity codes follow string order, so lexsort reproduces the tuple ordering
    _, g_id_code = np.unique(g_ids, return_inverse=True)
    views = sorted({e.view for e in gallery} | {e.view for e in probe})
    p_views = sorted({e.view for e in probe})
    gv_list = views
    vpos = {v: i for i, v in enumerate(gv_list)}
    ppos = {v: i for i, v in enumerate(p_views)}
    hits = np.zeros((len(p_views), len(gv_list)), dtype=np.int64)
    attempts = np.zeros_like(hits)
    excluded = np.zeros(hits.shape, dtype=bool)
    if exclude_identical_view:
        for v in p_views:
            excluded[ppos[v], vpos[v]] = True
    by_view = {v: np.flatnonzero(g_views == v) for v in gv_list}
    empty = [v for v in gv_list if by_view[v].size == 0]

    P = _stack(probe)
    G = _stack(gallery)
    for start, block in distance_rows(P, G):
        for r, dist in enumerate(block):
            pe = probe[start + r]
            for gv, cand in by_view.items():
                if cand.size == 0 or (exclude_identical_view and gv == pe.view):
                    continue
                order = np.lexsort((g_seq[cand], g_id_code[cand], dist[cand]))
                best = cand[order[0]]
                attempts[ppos[pe.view], vpos[gv]] += 1
                hits[ppos[pe.view], vpos[gv]] += int(g_ids[best] == pe.identity)
    for v in empty:
        logger.warning("EmptyGalleryView: gallery has no entries for view %s", v)
    return EvalMatrix(condition, p_views, gv_list, hits, attempts, excluded, empty)


CSV_HEADER = ["condition", "probe_view", "gallery_view", "accuracy", "attempts", "hits"]


def render_report(matrices: Mapping[str, EvalMatrix], gallery_label: str = "Gallery NM#1-4",
                  orientation: str = "columns") -> tuple[str, str]:
    """Render fixed-width text tables (percent, one decimal) and the CSV of raw cells."""
    if not matrices:
        raise EvaluationError("no matrices to report")
    blocks = []
    for cond, m in matrices.items():
        means = m.probe_view_means
        fmt = lambda x: "" if np.isnan(x) else f"{100 * x:.1f}"  # noqa: E731
        if orientation == "columns":
            head = [f"{v}" for v in m.probe_views] + ["Mean"]
            vals = [fmt(x) for x in means] + [fmt(m.mean)]
            w = max(6, *(len(h) + 1 for h in head))
            lines = [f"{gallery_label} | Probe {cond}",
                     f"{'':<8}" + "".join(f"{h:>{w}}" for h in head),
                     f"{cond:<8}" + "".join(f"{x:>{w}}" for x in vals)]
        else:
            lines = [f"{gallery_label} | Probe {cond}", f"{'Probe':>8}{'Rank-1':>10}"]
            lines += [f"{v:>8}{fmt(x):>10}" for v, x in zip(m.probe_views, means)]
            lines.append(f"{'mean':>8}{fmt(m.mean):>10}")
        if not m.present.any():
            lines.append("WARNING: every cell is absent (single view with identical-view exclusion?)")
        if m.empty_gallery_views:
            lines.append(f"WARNING: gallery has no entries for views {m.empty_gallery_views}")
        blocks.append("\n".join(lines))
    text = "\n\n".join(blocks) + "\n"

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for cond, m in matrices.items():
        acc = m.accuracy
        for i, pv in enumerate(m.probe_views):
            for j, gv in enumerate(m.gallery_views):
                a = "" if np.isnan(acc[i, j]) else repr(float(acc[i, j]))
                w.writerow([cond, pv, gv, a, int(m.attempts[i, j]), int(m.hits[i, j])])
    return text, buf.getvalue()


def evaluate(test_index: DatasetIndex, backbone: Backbone, protocol: str | Protocol = "casia_b",
             exclude_identical_view: bool = True, train_identities: Iterable[str] = ()) -> tuple[dict[str, EvalMatrix], ProtocolSets]:
    sets = build_protocol_sets(test_index, backbone, protocol, train_identities)
    mats = {name: rank1_matrix(sets.gallery, entries, exclude_identical_view, name)
            for name, entries in sets.probes.items()}
    return mats, sets
