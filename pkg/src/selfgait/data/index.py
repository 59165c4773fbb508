"""Dataset indexing for on-disk silhouette collections and protocol splits."""
from __future__ import annotations

import functools
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from ..errors import InsufficientIdentities
from .silhouette import load_aligned_frames, write_frame

logger = logging.getLogger(__name__)

CONDITIONS = ("NM", "BG", "CL")
CASIA_B_VIEWS = tuple(range(0, 181, 18))
OU_MVLP_VIEWS = (0, 15, 30, 45, 60, 75, 90, 180, 195, 210, 225, 240, 255, 270)
FRAME_SUFFIXES = (".png",)

_CASIA_SUBJECT = re.compile(r"^\d{3}$")
_CASIA_SEQ = re.compile(r"^(nm|bg|cl)-(\d{2})$")
_CASIA_VIEW = re.compile(r"^\d{3}$")
_OU_SUBJECT = re.compile(r"^\d{5}$")
_OU_SEQ = re.compile(r"^(\d{3})_(\d{2})$")


@dataclass(frozen=True)
class GaitSequence:
    """One walking sequence of one subject seen from one view.

    Frames are either held in memory (synthetic data) or loaded lazily from
    ``frame_paths``.
    """

    identity: str
    view: int
    condition: str
    sequence_index: int
    frame_paths: tuple[str, ...] = ()
    data: np.ndarray | None = field(default=None, repr=False, compare=False)

    @property
    def key(self) -> tuple:
        return (self.identity, self.condition, self.sequence_index, self.view)

    def __len__(self) -> int:
        if self.data is not None:
            return len(self.data)
        return len(self.frame_paths)

    def frames(self) -> np.ndarray:
        """Return a (T, 64, 44) float32 array; do not mutate it."""
        if self.data is not None:
            return self.data
        return _cached_frames(self.frame_paths)


@functools.lru_cache(maxsize=4096)
def _cached_frames(paths: tuple[str, ...]) -> np.ndarray:
    arr = load_aligned_frames(paths)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class LayoutWarning:
    """A path that could not be parsed (the MalformedLayout condition)."""

    path: str
    reason: str


@dataclass(frozen=True)
class DatasetIndex:
    sequences: tuple[GaitSequence, ...]
    warnings: tuple[LayoutWarning, ...] = ()

    def __len__(self) -> int:
        return len(self.sequences)

    def __iter__(self):
        return iter(self.sequences)

    @property
    def identities(self) -> list[str]:
        return sorted({s.identity for s in self.sequences})

    @property
    def conditions(self) -> list[str]:
        return sorted({s.condition for s in self.sequences})

    @property
    def views(self) -> list[int]:
        return sorted({s.view for s in self.sequences})

    def by_identity(self) -> dict[str, list[GaitSequence]]:
        out: dict[str, list[GaitSequence]] = {}
        for s in sorted(self.sequences, key=lambda s: s.key):
            out.setdefault(s.identity, []).append(s)
        return out

    def subset(self, identities: Iterable[str]) -> "DatasetIndex":
        keep = set(identities)
        return DatasetIndex(tuple(s for s in self.sequences if s.identity in keep), self.warnings)

    def summary(self) -> dict:
        return {
            "sequences": len(self.sequences),
            "identities": len(self.identities),
            "conditions": len(self.conditions),
            "views": len(self.views),
            "warnings": len(self.warnings),
        }


def _frame_files(directory: Path) -> tuple[str, ...]:
    return tuple(
        str(p) for p in sorted(directory.iterdir(), key=lambda p: p.name)
        if p.is_file() and p.suffix.lower() in FRAME_SUFFIXES
    )


def _subdirs(directory: Path) -> list[Path]:
    return sorted((p for p in directory.iterdir() if p.is_dir()), key=lambda p: p.name)


def index_casia_b(root: str | Path) -> DatasetIndex:
    """Index ``root/<subject>/<cond>-<seq>/<view>/<frame>.png``.

    Unparseable components produce a :class:`LayoutWarning` and are skipped;
    indexing never fails on layout problems.
    """
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset root not found: {root}")
    seqs: list[GaitSequence] = []
    warns: list[LayoutWarning] = []
    for subject in _subdirs(root):
        if not _CASIA_SUBJECT.match(subject.name):
            warns.append(LayoutWarning(str(subject), "subject id is not a 3-digit number"))
            continue
        for seq_dir in _subdirs(subject):
            m = _CASIA_SEQ.match(seq_dir.name)
            if not m:
                warns.append(LayoutWarning(str(seq_dir), "expected <nm|bg|cl>-<2-digit seq>"))
                continue
            cond, seq_no = m.group(1).upper(), int(m.group(2))
            for view_dir in _subdirs(seq_dir):
                if not _CASIA_VIEW.match(view_dir.name):
                    warns.append(LayoutWarning(str(view_dir), "view is not a 3-digit angle"))
                    continue
                frames = _frame_files(view_dir)
                if not frames:
                    warns.append(LayoutWarning(str(view_dir), "no frame files"))
                    continue
                seqs.append(GaitSequence(subject.name, int(view_dir.name), cond, seq_no, frames))
    _log_summary("CASIA-B", seqs, warns)
    return DatasetIndex(tuple(seqs), tuple(warns))


def index_ou_mvlp(root: str | Path) -> DatasetIndex:
    """Index ``root/<5-digit subject>/<view>_<seq>/<frame>.png`` (all NM)."""
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset root not found: {root}")
    seqs: list[GaitSequence] = []
    warns: list[LayoutWarning] = []
    for subject in _subdirs(root):
        if not _OU_SUBJECT.match(subject.name):
            warns.append(LayoutWarning(str(subject), "subject id is not a 5-digit number"))
            continue
        for seq_dir in _subdirs(subject):
            m = _OU_SEQ.match(seq_dir.name)
            if not m:
                warns.append(LayoutWarning(str(seq_dir), "expected <3-digit view>_<2-digit seq>"))
                continue
            frames = _frame_files(seq_dir)
            if not frames:
                warns.append(LayoutWarning(str(seq_dir), "no frame files"))
                continue
            seqs.append(GaitSequence(subject.name, int(m.group(1)), "NM", int(m.group(2)), frames))
    _log_summary("OU-MVLP", seqs, warns)
    return DatasetIndex(tuple(seqs), tuple(warns))


def _log_summary(name, seqs, warns):
    ids = {s.identity for s in seqs}
    conds = {s.condition for s in seqs}
    views = {s.view for s in seqs}
    logger.info("%s index: %d sequences, %d subjects, %d conditions, %d views, %d warnings",
                name, len(seqs), len(ids), len(conds), len(views), len(warns))
    for w in warns:
        logger.warning("malformed layout: %s (%s)", w.path, w.reason)


def write_casia_b(index: DatasetIndex, root: str | Path) -> DatasetIndex:
    """Materialise in-memory sequences in the CASIA-B directory convention."""
    root = Path(root)
    written = []
    for s in index.sequences:
        d = root / s.identity / f"{s.condition.lower()}-{s.sequence_index:02d}" / f"{s.view:03d}"
        d.mkdir(parents=True, exist_ok=True)
        paths = []
        for t, frame in enumerate(s.frames()):
            p = d / f"{t:03d}.png"
            write_frame(p, frame)
            paths.append(str(p))
        written.append(GaitSequence(s.identity, s.view, s.condition, s.sequence_index, tuple(paths)))
    return DatasetIndex(tuple(written), index.warnings)


# identities required by the fixed protocols: (train count, minimum total)
PROTOCOLS = {
    "casia_b_lt": (74, 124),
    "ou_mvlp": (5153, 10307),
}


def protocol_split(index: DatasetIndex, protocol: str = "casia_b_lt",
                   train_ids: Sequence[str] | None = None,
                   test_ids: Sequence[str] | None = None) -> tuple[list[str], list[str]]:
    """Split identities into (train, test) lists.

    Fixed protocols sort identities ascending and take the leading block for
    training. ``custom`` echoes the explicit lists unchanged.
    """
    if protocol == "custom":
        if train_ids is None or test_ids is None:
            raise ValueError("custom protocol needs explicit train_ids and test_ids")
        return list(train_ids), list(test_ids)
    if protocol not in PROTOCOLS:
        raise ValueError(f"unknown protocol {protocol!r}")
    ids = index.identities
    if not ids:
        raise InsufficientIdentities("index is empty")
    n_train, n_min = PROTOCOLS[protocol]
    if len(ids) < n_min:
        raise InsufficientIdentities(
            f"{protocol} needs at least {n_min} identities, index has {len(ids)}")
    return ids[:n_train], ids[n_train:]
