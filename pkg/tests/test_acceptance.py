"""Acceptance suite: one test per criterion, each recording a PASS/FAIL line.

Training-based criteria run the desk-scale profile (narrow CNN, 2x input
pooling, 8-frame clips) on synthetic data; the heavy runs are cached per
session so criteria 8, 9 and 10 share them.
"""
import functools
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import pytest
import torch

from helpers import (
    GRAD_CFG, GRAD_T, analytic_grads, brute_force_rank1, brute_force_triplets, central_fd, record, rel_error,
)
from selfgait.backbone import Backbone, BackboneConfig
from selfgait.data import generate_synthetic_dataset, sample_training_batch
from selfgait.evaluation import Entry, evaluate, rank1_matrix
from selfgait.finetune import FinetuneConfig, build_backbone, enumerate_triplets, finetune, triplet_loss_ba
from selfgait.pretrain import PretrainConfig, build_networks, cosine_loss, ema_update, measure_similarity, pretrain
from selfgait.rng import stream

DESK_BACKBONE = BackboneConfig(cnn_channels=(8, 8, 16), stripe_dim=32, d1=32, input_pool=2)
DESK_PRETRAIN = PretrainConfig(iterations=500, k=8, d2=64, lr=1e-3)
DESK_FINETUNE = FinetuneConfig(iterations=2000, k=8, lr=1e-4)
PAIRED_SEEDS = range(10)


def cells(m):
    return {(pv, gv): (int(m.hits[i, j]), int(m.attempts[i, j]))
            for i, pv in enumerate(m.probe_views) for j, gv in enumerate(m.gallery_views) if m.attempts[i, j]}


# ---------------------------------------------------------------- 1

def test_criterion_01_gradient_suite():
    t0 = time.perf_counter()
    errors = {}
    g = torch.Generator().manual_seed(0)

    y_on = torch.randn(3, 8, 8, generator=g, dtype=torch.float64, requires_grad=True)
    y_tar = torch.randn(3, 8, 8, generator=g, dtype=torch.float64)
    (ga,) = analytic_grads(lambda: cosine_loss(y_on, y_tar), [y_on])
    errors["cosine_loss"] = rel_error(ga, central_fd(lambda: cosine_loss(y_on, y_tar), y_on.data))

    emb = torch.randn(8, 3, 8, generator=g, dtype=torch.float64)
    labels = [i // 2 for i in range(8)]
    d = torch.linalg.vector_norm(emb[:, None] - emb[None], dim=-1).mean(-1)
    assert (0.2 + d[:, :, None] - d[:, None, :]).abs().min() > 1e-4  # no hinge at its kink
    emb.requires_grad_(True)
    (ga,) = analytic_grads(lambda: triplet_loss_ba(emb, labels), [emb])
    errors["triplet_loss_ba"] = rel_error(ga, central_fd(lambda: triplet_loss_ba(emb, labels), emb.data))

    torch.manual_seed(0)
    bb = Backbone(GRAD_CFG).double()
    x = torch.rand(2, GRAD_T, GRAD_CFG.height, GRAD_CFG.width, generator=g, dtype=torch.float64)
    w = torch.randn(2, GRAD_CFG.n, GRAD_CFG.d1, generator=g, dtype=torch.float64)

    def scalar():
        return (bb(x) * w).sum()

    params = list(bb.named_parameters())
    for (name, p), ga in zip(params, analytic_grads(scalar, [p for _, p in params])):
        errors[f"backbone.{name}"] = rel_error(ga, central_fd(scalar, p.data))
    elapsed = time.perf_counter() - t0
    worst = max(errors, key=errors.get)
    ok = errors[worst] <= 1e-4 and elapsed < 60
    record(1, "gradient suite", ok,
           f"{len(errors)} blocks, worst rel err {errors[worst]:.2e} ({worst}), {elapsed:.1f}s")
    assert ok


# ---------------------------------------------------------------- 2

def test_criterion_02_shape_law():
    cfg = BackboneConfig()
    online, target = build_networks(cfg, d2=256)
    online.train()
    target.train()
    shapes = {}
    with torch.no_grad():
        for B in (1, 16):
            shapes[B] = (tuple(online(torch.rand(B, 30, 64, 44)).shape), tuple(target(torch.rand(B, 64, 44)).shape))
    ok = cfg.n == 31 and all(s == ((B, 31, 256), (B, 31, 256)) for B, s in shapes.items())
    record(2, "shape law", ok, f"n={cfg.n}; online/target shapes {shapes}")
    assert ok


# ---------------------------------------------------------------- 3

def test_criterion_03_eval_oracle():
    rng = np.random.default_rng(3)
    views = [0, 18, 36, 54]
    t0 = time.perf_counter()
    mismatches, sizes, in_rank1 = 0, [], 0.0
    for inst in range(20):
        n_g = int(rng.integers(40, 300))
        n_p = int(rng.integers(20, 500 - n_g + 1))
        gallery = [Entry(rng.standard_normal((4, 8)), f"{rng.integers(10):03d}", int(rng.choice(views)), "NM",
                         int(rng.integers(1, 5))) for _ in range(n_g)]
        # a few exact duplicates under other identities exercise the tie-break
        for _ in range(5):
            src = gallery[int(rng.integers(n_g))]
            gallery.append(Entry(src.embedding.copy(), f"{rng.integers(10):03d}", src.view, "NM",
                                 int(rng.integers(1, 5))))
        gallery = gallery[:500 - n_p]
        probe = [Entry(rng.standard_normal((4, 8)), f"{rng.integers(10):03d}", int(rng.choice(views)), "NM")
                 for _ in range(n_p)]
        probe[0] = Entry(gallery[0].embedding.copy(), gallery[0].identity, gallery[1].view, "NM")
        exclude = bool(inst % 2)
        sizes.append(len(gallery) + len(probe))
        t1 = time.perf_counter()
        mat = rank1_matrix(gallery, probe, exclude)
        in_rank1 += time.perf_counter() - t1
        if cells(mat) != brute_force_rank1(gallery, probe, exclude):
            mismatches += 1
    elapsed = time.perf_counter() - t0
    ok = mismatches == 0 and elapsed < 30 and max(sizes) <= 500
    record(3, "eval oracle", ok, f"{20 - mismatches}/20 instances identical (sizes {min(sizes)}-{max(sizes)}), "
                                 f"{in_rank1:.1f}s in rank1_matrix, {elapsed:.1f}s including the oracle")
    assert ok


# ---------------------------------------------------------------- 4

def test_criterion_04_triplet_count_law():
    rng = np.random.default_rng(4)
    checked, bad = 0, []
    for _ in range(30):
        P, K = int(rng.integers(2, 7)), int(rng.integers(2, 5))
        labels = [f"id{p}" for p in range(P) for _ in range(K)]
        labels = [labels[i] for i in rng.permutation(len(labels))]
        got = sorted(map(tuple, enumerate_triplets(labels).tolist()))
        if got != sorted(brute_force_triplets(labels)) or len(got) != P * K * (K - 1) * (P - 1) * K:
            bad.append((P, K))
        checked += 1
    n224 = len(enumerate_triplets([p for p in range(8) for _ in range(2)]))
    ok = not bad and n224 == 224
    record(4, "triplet-count law", ok, f"{checked - len(bad)}/{checked} random (P,K) match the oracle; P=8,K=2 -> {n224}")
    assert ok


# ---------------------------------------------------------------- 5

def test_criterion_05_ema_exactness():
    cfg = BackboneConfig(cnn_channels=(4, 4, 8), stripe_dim=16, d1=16, input_pool=2)

    def perturbed():
        online, target = build_networks(cfg, d2=16, share_fc_bins=False)
        with torch.no_grad():
            for p in online.parameters():
                p.add_(torch.randn_like(p))
        return online, target

    online, target = perturbed()
    before = [t.detach().clone() for t in target.parameters()]
    ema_update(target, online, 1.0)
    keep = all(torch.equal(a, b) for a, b in zip(before, target.parameters()))

    online, target = perturbed()
    ema_update(target, online, 0.0)
    pairs = [(target.encoder, online.backbone.encoder), (target.projection, online.projection),
             (target.fc_bins, online.backbone.fc_bins)]
    copied = all(torch.equal(a, b) for t, o in pairs for a, b in zip(t.state_dict().values(), o.state_dict().values()))

    online, target = perturbed()
    blocks = [("encoder.cnn.conv1.weight", "backbone.encoder.cnn.conv1.weight"),
              ("projection.conv.weight", "projection.conv.weight"),
              ("fc_bins.bias", "backbone.fc_bins.bias")]
    t_params, o_params = dict(target.named_parameters()), dict(online.named_parameters())
    hand = {}
    for tn, on in blocks:
        t, o = t_params[tn].detach().numpy().astype(np.float64), o_params[on].detach().numpy().astype(np.float64)
        hand[tn] = np.array([0.5 * a + 0.5 * b for a, b in zip(t.ravel(), o.ravel())]).reshape(t.shape)
    ema_update(target, online, 0.5)
    t_params = dict(target.named_parameters())
    worst = max(float(np.abs(t_params[tn].detach().numpy() - hand[tn]).max()) for tn, _ in blocks)
    half = worst <= 1e-7  # float32 parameters: hand result rounded once, torch result rounded once
    ok = keep and copied and half
    record(5, "EMA exactness", ok, f"tau=1 bit-identical: {keep}; tau=0 exact copy: {copied}; "
                                   f"tau=0.5 worst deviation on 3 blocks {worst:.1e}")
    assert ok


# ---------------------------------------------------------------- 6 / 7

@dataclass
class SmokeRun:
    seed: int
    initial: float
    final: float
    std_min: float
    seconds: float

    @property
    def passed(self) -> bool:
        return abs(self.initial) < 0.3 and self.final >= 0.8


@pytest.fixture(scope="session")
def smoke_runs():
    ds = generate_synthetic_dataset()
    runs = []
    for seed in range(20):
        t0 = time.perf_counter()
        cfg = replace(DESK_PRETRAIN, seed=seed)
        online, target = build_networks(DESK_BACKBONE, cfg.d2, seed)
        probe_rng = stream(seed, "probe")
        c0, _ = measure_similarity(sample_training_batch(ds, cfg.P, cfg.K, cfg.k, probe_rng), online, target)
        pretrain(ds, DESK_BACKBONE, cfg, networks=(online, target))
        c1, std = measure_similarity(sample_training_batch(ds, cfg.P, cfg.K, cfg.k, probe_rng), online, target)
        runs.append(SmokeRun(seed, c0, c1, std, time.perf_counter() - t0))
    return runs


def test_criterion_06_pretrain_smoke(smoke_runs):
    passed = sum(r.passed for r in smoke_runs)
    total = sum(r.seconds for r in smoke_runs)
    ok = passed >= 19 and total < 600
    record(6, "pre-training smoke", ok,
           f"{passed}/20 runs from |c|<0.3 to c>=0.8 in 500 steps "
           f"(init max |c| {max(abs(r.initial) for r in smoke_runs):.3f}, "
           f"final min c {min(r.final for r in smoke_runs):.3f}), {total:.0f}s total")
    assert ok


def test_criterion_07_anti_collapse(smoke_runs):
    passing = [r for r in smoke_runs if r.passed]
    low = min(r.std_min for r in passing) if passing else float("nan")
    ok = bool(passing) and all(r.std_min >= 1e-3 for r in passing)
    record(7, "anti-collapse sentinel", ok, f"min across-batch std of y_tar over {len(passing)} passing runs: {low:.4f}")
    assert ok


# ---------------------------------------------------------------- 8 / 9 / 10

@dataclass
class Trial:
    first_below: int | None
    rank1: float
    seconds: float


@functools.lru_cache(maxsize=None)
def easy_split(seed: int):
    ds = generate_synthetic_dataset(12, 6, (0, 90), ("NM",), 40, seed=seed)
    ids = ds.identities
    return ds.subset(ids[:8]), ds.subset(ids[8:]), tuple(ids[:8])


@functools.lru_cache(maxsize=None)
def trial(seed: int, ablation: str, pretrained: bool) -> Trial:
    train, test, train_ids = easy_split(seed)
    cfg = replace(DESK_BACKBONE, ablation=ablation)
    t0 = time.perf_counter()
    if pretrained:
        backbone = pretrain(train, cfg, replace(DESK_PRETRAIN, seed=seed)).online.backbone
    else:
        backbone = build_backbone(cfg, seed)
    history = finetune(train, backbone, replace(DESK_FINETUNE, seed=seed))
    mats, _ = evaluate(test, backbone, "casia_b", True, train_ids)
    return Trial(history.first_step_below(0.05), mats["NM"].mean, time.perf_counter() - t0)


def test_criterion_09_end_to_end():
    t = trial(0, "full", True)
    ok = t.rank1 >= 0.9 and t.seconds < 1200
    record(9, "end-to-end recognition", ok,
           f"held-out cross-view rank-1 {100 * t.rank1:.1f}% after 500 + 2000 steps, {t.seconds:.0f}s")
    assert ok


def test_criterion_08_pretraining_effectiveness():
    rows, wins = [], 0
    for seed in PAIRED_SEEDS:
        warm, cold = trial(seed, "full", True), trial(seed, "full", False)
        faster = warm.first_below is not None and (cold.first_below is None or warm.first_below < cold.first_below)
        win = faster and warm.rank1 >= cold.rank1
        wins += win
        rows.append(f"{seed}:{warm.first_below}/{cold.first_below}")
    ok = wins >= 8
    record(8, "pre-training effectiveness", ok,
           f"{wins}/10 paired seeds faster to loss<0.05 with rank-1 not lower (steps pre/scratch {' '.join(rows)})")
    assert ok


def test_criterion_10_ablation_direction():
    counts, detail = {}, []
    for abl in ("no_hpm", "no_mtb"):
        counts[abl] = sum(trial(s, "full", True).rank1 >= trial(s, abl, True).rank1 for s in PAIRED_SEEDS)
        means = np.mean([trial(s, abl, True).rank1 for s in PAIRED_SEEDS])
        detail.append(f"full >= {abl} in {counts[abl]}/10 (mean {abl} rank-1 {100 * means:.1f}%)")
    full_mean = np.mean([trial(s, "full", True).rank1 for s in PAIRED_SEEDS])
    ok = all(c >= 8 for c in counts.values())
    record(10, "ablation direction", ok, "; ".join(detail) + f"; mean full rank-1 {100 * full_mean:.1f}%")
    assert ok


# ---------------------------------------------------------------- 11

def test_criterion_11_determinism(tmp_path: Path):
    ds = generate_synthetic_dataset(6, 3, (0, 90), ("NM",), 16, seed=11)
    paths = []
    for run in ("a", "b"):
        out = tmp_path / run
        pt = pretrain(ds, DESK_BACKBONE, replace(DESK_PRETRAIN, iterations=20, P=4, seed=5), out_dir=out)
        finetune(ds, pt.online.backbone, replace(DESK_FINETUNE, iterations=20, P=4, seed=5), out_dir=out)
        paths.append(out)
    same = {name: (paths[0] / name).read_bytes() == (paths[1] / name).read_bytes()
            for name in ("pretrain_final.ckpt", "finetune_final.ckpt")}
    ok = all(same.values())
    record(11, "determinism", ok, f"byte-identical checkpoints across two runs: {same}")
    assert ok
