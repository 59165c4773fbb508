import csv
import io
import math

import numpy as np
import pytest

from helpers import brute_force_rank1
from selfgait.backbone import Backbone, BackboneConfig
from selfgait.data import generate_synthetic_dataset
from selfgait.errors import EvaluationError
from selfgait.evaluation import (
    CSV_HEADER, Entry, EvalMatrix, build_protocol_sets, evaluate, rank1_matrix, render_report,
)

SMALL = BackboneConfig(cnn_channels=(4, 4, 8), stripe_dim=16, d1=16, input_pool=2)


def random_entries(rng, count, views, ids, n=3, d=4, seq_base=0):
    return [Entry(rng.standard_normal((n, d)), f"{rng.choice(ids):03d}", int(rng.choice(views)), "NM",
                  seq_base + i) for i in range(count)]


def cells(m: EvalMatrix):
    out = {}
    for i, pv in enumerate(m.probe_views):
        for j, gv in enumerate(m.gallery_views):
            if m.attempts[i, j]:
                out[(pv, gv)] = (int(m.hits[i, j]), int(m.attempts[i, j]))
    return out


def test_constructed_nearest_neighbour():
    e1 = np.zeros((2, 3))
    e2 = np.full((2, 3), 5.0)
    gallery = [Entry(e1, "001", 0, "NM"), Entry(e2, "002", 0, "NM")]
    probe = [Entry(e1 + 0.1, "001", 18, "NM")]
    m = rank1_matrix(gallery, probe)
    assert m.accuracy[0, m.gallery_views.index(0)] == 1.0


def test_identical_probe_without_exclusion():
    g = [Entry(np.eye(3), "001", 36, "NM"), Entry(2 * np.eye(3), "002", 36, "NM")]
    m = rank1_matrix(g, [Entry(np.eye(3), "001", 36, "NM")], exclude_identical_view=False)
    assert m.accuracy[0, 0] == 1.0 and m.mean == 1.0


@pytest.mark.parametrize("exclude", [True, False])
def test_matches_brute_force_oracle(exclude):
    rng = np.random.default_rng(0)
    views, ids = [0, 18, 36, 54], range(10)
    for _ in range(5):
        gallery = random_entries(rng, 60, views, ids)
        probe = random_entries(rng, 40, views, ids, seq_base=1000)
        assert cells(rank1_matrix(gallery, probe, exclude)) == brute_force_rank1(gallery, probe, exclude)


def test_tie_break_is_identity_then_sequence():
    e = np.ones((2, 2))
    gallery = [Entry(e, "009", 0, "NM", 1), Entry(e, "003", 0, "NM", 2), Entry(e, "003", 0, "NM", 1)]
    probe = [Entry(e, "003", 90, "NM")]
    assert rank1_matrix(gallery, probe).hits.sum() == 1
    probe = [Entry(e, "009", 90, "NM")]
    assert rank1_matrix(gallery, probe).hits.sum() == 0


def test_duplicate_and_permuted_gallery_leave_cells_unchanged():
    rng = np.random.default_rng(1)
    views, ids = [0, 90, 180], range(6)
    gallery = random_entries(rng, 30, views, ids)
    probe = random_entries(rng, 20, views, ids, seq_base=100)
    ref = cells(rank1_matrix(gallery, probe))
    assert cells(rank1_matrix(gallery + gallery, probe)) == ref
    shuffled = [gallery[i] for i in rng.permutation(len(gallery))]
    assert cells(rank1_matrix(shuffled, probe)) == ref


def test_exclusion_law():
    rng = np.random.default_rng(2)
    views = [0, 90]
    gallery = random_entries(rng, 20, views, range(4))
    probe = random_entries(rng, 20, views, range(4), seq_base=50)
    m = rank1_matrix(gallery, probe, True)
    for i, pv in enumerate(m.probe_views):
        j = m.gallery_views.index(pv)
        assert m.attempts[i, j] == 0 and np.isnan(m.accuracy[i, j])
    acc = m.accuracy
    assert np.all((acc[~np.isnan(acc)] >= 0) & (acc[~np.isnan(acc)] <= 1))


def test_single_view_report_warns():
    g = [Entry(np.eye(2), "001", 0, "NM"), Entry(np.eye(2) * 3, "002", 0, "NM")]
    m = rank1_matrix(g, [Entry(np.eye(2), "001", 0, "NM")], True, "NM")
    assert math.isnan(m.mean)
    text, table = render_report({"NM": m})
    assert "WARNING" in text
    row = list(csv.reader(io.StringIO(table)))[1]
    assert row[3] == ""


def test_empty_gallery_view_is_absent():
    g = [Entry(np.eye(2), "001", 0, "NM")]
    probe = [Entry(np.eye(2), "001", 90, "NM"), Entry(np.eye(2), "001", 18, "NM")]
    m = rank1_matrix(g, probe, True)
    assert 90 in m.empty_gallery_views and 18 in m.empty_gallery_views
    assert m.mean == 1.0


def test_empty_inputs():
    with pytest.raises(EvaluationError):
        rank1_matrix([], [Entry(np.eye(2), "001", 0, "NM")])


def _full_matrix(views, condition):
    rng = np.random.default_rng(3)
    gallery = [Entry(rng.standard_normal((2, 2)), f"{i:03d}", v, "NM") for i in range(3) for v in views]
    probe = [Entry(rng.standard_normal((2, 2)), f"{i:03d}", v, condition) for i in range(3) for v in views]
    return rank1_matrix(gallery, probe, True, condition)


def test_casia_report_layout():
    views = list(range(0, 181, 18))
    mats = {c: _full_matrix(views, c) for c in ("NM", "BG", "CL")}
    text, table = render_report(mats)
    block = text.split("\n\n")[0].splitlines()
    assert block[0] == "Gallery NM#1-4 | Probe NM"
    header = block[1].split()
    assert header == [str(v) for v in views] + ["Mean"]
    values = block[2].split()
    assert values[0] == "NM" and len(values) == 13
    assert all(len(v.split(".")[1]) == 1 for v in values[1:])
    rows = list(csv.reader(io.StringIO(table)))
    assert rows[0] == CSV_HEADER
    assert len(rows) == 1 + 3 * 11 * 11
    diag = [r for r in rows[1:] if r[1] == r[2]]
    assert all(r[3] == "" for r in diag)


def test_ou_mvlp_report_has_fourteen_rows():
    views = [*range(0, 91, 15), *range(180, 271, 15)]
    assert len(views) == 14
    text, _ = render_report({"NM": _full_matrix(views, "NM")}, "Gallery all views, seq #01", "rows")
    lines = text.strip().splitlines()
    body = [ln for ln in lines[2:] if not ln.strip().startswith("mean")]
    assert len(body) == 14
    assert lines[-1].split()[0] == "mean"


@pytest.fixture(scope="module")
def two_condition_set():
    return generate_synthetic_dataset(3, 6, (0, 90), ("NM", "BG"), 6, seed=4)


def test_protocol_sets_sizes_and_missing_conditions(two_condition_set):
    sets = build_protocol_sets(two_condition_set, Backbone(SMALL), "casia_b")
    assert len(sets.gallery) == 3 * 2 * 4
    assert len(sets.probes["NM"]) == 3 * 2 * 2
    assert len(sets.probes["BG"]) == 3 * 2 * 2
    assert "CL" not in sets.probes
    assert any(w.startswith("MissingCondition") and "CL" in w for w in sets.warnings)
    assert sets.gallery[0].embedding.shape == (31, 16)


def test_protocol_rejects_overlap_and_empty(two_condition_set):
    bb = Backbone(SMALL)
    with pytest.raises(EvaluationError):
        build_protocol_sets(two_condition_set, bb, "casia_b", train_identities=["001"])
    with pytest.raises(EvaluationError):
        build_protocol_sets(two_condition_set.subset([]), bb, "casia_b")


def test_evaluate_returns_matrix_per_present_condition(two_condition_set):
    mats, _ = evaluate(two_condition_set, Backbone(SMALL), "casia_b", True)
    assert set(mats) == {"NM", "BG"}
    for m in mats.values():
        assert m.probe_views == [0, 90]
        assert 0.0 <= m.mean <= 1.0
