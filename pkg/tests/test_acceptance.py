"""Acceptance suite: one test per primary criterion, each printing a PASS/FAIL line."""
import math
import subprocess
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from cromotex import pipeline as P
from cromotex.config import TrainConfig
from cromotex.data import generate_dataset, weighted_batches
from cromotex.gradcheck import run_suite
from cromotex.losses import AhnpConfig, ahnp_supcma_loss, cma_loss, cross_entropy_loss, ntxent_loss, supcma_loss
from cromotex.metrics import auroc
from cromotex.optim import ScheduleConfig, clip_global_norm, global_norm, lr_at
from cromotex.signal import DOWER, INVERSE_DOWER, dower, inverse_dower, moving_median, preprocess, random_rotation
from oracles import oracle_auroc, oracle_cross_entropy, oracle_moving_median, oracle_ntxent, oracle_symmetric

ROOT = Path(__file__).resolve().parents[1]
REFERENCE = ROOT / "configs" / "reference.json"
SMOKE = ROOT / "configs" / "smoke.json"


def unit_rows(rng, n, d):
    x = rng.standard_normal((n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def test_gradient_suite(verdict):
    t0 = time.perf_counter()
    rows = run_suite(20)
    elapsed = time.perf_counter() - t0
    failed = [r.name for r in rows if not r.passed or r.seeds < 20]
    worst = max(r.max_rel_err for r in rows if r.name != "composed_tiny_model")
    model = next(r.max_rel_err for r in rows if r.name == "composed_tiny_model")
    verdict(1, "gradient suite", not failed and elapsed <= 120,
            f"{len(rows)} cases, worst loss err {worst:.2e}, model err {model:.2e}, {elapsed:.0f}s"
            + (f", failed {failed}" if failed else ""))


def test_degenerate_reduction_chain(verdict):
    rng = np.random.default_rng(2024)
    base = AhnpConfig(include_self=True)
    neutral = replace(base, beta=0.0, alpha=1.0, strategy="topk")
    worst = 0.0
    for _ in range(100):
        n, d = int(rng.integers(2, 33)), int(rng.integers(2, 17))
        ze, zx = unit_rows(rng, n, d), unit_rows(rng, n, d)
        labels = rng.permutation(n)
        a = ahnp_supcma_loss(ze, zx, labels, neutral)
        s = supcma_loss(ze, zx, labels, base)
        c = cma_loss(ze, zx, base)
        worst = max(worst, abs(a.value - s.value), abs(s.value - c.value),
                    *(np.max(np.abs(g1 - g2)) for g1, g2 in zip(a.grads, c.grads)))
    verdict(2, "degenerate reduction chain", worst <= 1e-12, f"max deviation {worst:.1e} over 100 batches")


def test_oracle_equivalence(verdict):
    rng = np.random.default_rng(77)
    loss_err = 0.0
    for _ in range(3):
        n, d = 6, 5
        ze, zx = unit_rows(rng, n, d), unit_rows(rng, n, d)
        y = rng.integers(0, 2, n)
        y[:2] = (0, 1)
        sum_cfg = AhnpConfig(reduction="sum", tau=0.1)
        loss_err = max(loss_err,
                       abs(cma_loss(ze, zx, sum_cfg).value
                           - oracle_symmetric(ze, zx, None, 0.1, supervised=False, weighted=False)),
                       abs(supcma_loss(ze, zx, y, sum_cfg).value
                           - oracle_symmetric(ze, zx, y, 0.1, supervised=True, weighted=False)))
        for strategy in ("exp", "topk", "linear"):
            for scope in ("negatives_only", "all"):
                alpha = 3.0 if strategy == "linear" else 4.5
                cfg = AhnpConfig(strategy=strategy, alpha=alpha, beta=2.0, tau=0.01, weight_scope=scope,
                                 reduction="mean")
                ref = oracle_symmetric(ze, zx, y, 0.01, reduction="mean", supervised=True, weighted=True,
                                       beta=2.0, strategy=strategy, alpha=alpha, k_percent=7.5, scope=scope)
                loss_err = max(loss_err, abs(ahnp_supcma_loss(ze, zx, y, cfg).value - ref))
        loss_err = max(loss_err, abs(ntxent_loss(ze, zx, 0.1).value - oracle_ntxent(ze, zx, 0.1)))
        logits = rng.standard_normal((n, 2)) * 3
        loss_err = max(loss_err, abs(cross_entropy_loss(logits, y).value - oracle_cross_entropy(logits, y)))

    auc_err = 0.0
    for n in (2, 17, 120, 500):
        scores = rng.integers(0, 25, n) / 9.0  # coarse grid forces ties
        labels = rng.integers(0, 2, n)
        labels[:2] = (0, 1)
        auc_err = max(auc_err, abs(auroc(scores, labels) - oracle_auroc(scores, labels)))

    median_exact = True
    for window in (3, 31, 61):
        row = rng.standard_normal(300)
        median_exact &= bool(np.array_equal(moving_median(row, window), np.array(oracle_moving_median(list(row), window))))

    ok = loss_err <= 1e-9 and auc_err <= 1e-12 and median_exact
    verdict(3, "oracle equivalence", ok,
            f"loss err {loss_err:.1e}, AUROC err {auc_err:.1e}, median exact {median_exact}")


def test_signal_invariants(verdict):
    rng = np.random.default_rng(5)
    shape_ok = True
    for rate in (100, 200, 500, 1000):
        for scale in (1e-3, 1.0, 1e3):
            x = scale * rng.standard_normal((12, rate * 10)) + rng.uniform(-5, 5, (12, 1))
            out = preprocess(x, rate)
            shape_ok &= out.shape == (12, 1000) and bool(np.all(np.abs(out) <= 1.0))
    rot_err = 0.0
    for seed in range(100):
        R = random_rotation(np.random.default_rng(seed), 45.0)
        rot_err = max(rot_err, np.max(np.abs(R.T @ R - np.eye(3))), abs(np.linalg.det(R) - 1.0))
    e = rng.standard_normal((12, 1000))
    once = dower(inverse_dower(e))
    proj = DOWER @ INVERSE_DOWER
    idem = max(np.max(np.abs(dower(inverse_dower(once)) - once)), np.max(np.abs(proj @ proj - proj)))
    verdict(4, "signal invariants", shape_ok and rot_err <= 1e-10 and idem <= 1e-10,
            f"12x1000 in [-1,1] {shape_ok}, rotation err {rot_err:.1e}, idempotence err {idem:.1e}")


def test_sampler(verdict):
    labels = np.r_[np.ones(50), np.zeros(950)].astype(int)
    stream = weighted_batches(labels, 256, 0.275, seed=0)
    mean_1k = float(np.mean([labels[next(stream)].mean() for _ in range(1000)]))
    stream = weighted_batches(labels, 256, 0.275, seed=1)
    fracs = np.array([labels[next(stream)].mean() for _ in range(10_000)])
    se = float(fracs.std(ddof=1) / math.sqrt(fracs.size))
    verdict(5, "minority sampler", 0.25 <= mean_1k <= 0.30 and se <= 0.01,
            f"mean fraction {mean_1k:.4f}, SE over 10k {se:.1e}")


def test_schedule_and_clip(verdict):
    sched = ScheduleConfig(start_lr=1e-5, peak_lr=1e-4, end_lr=1e-5, warmup_epochs=10, total_epochs=100,
                           steps_per_epoch=7)
    warm, total = 70, 700
    ends = (abs(lr_at(0, sched) - 1e-5), abs(lr_at(warm, sched) - 1e-4), abs(lr_at(total, sched) - 1e-5))
    warm_limit = sched.start_lr + (sched.peak_lr - sched.start_lr) * warm / warm
    cos_limit = sched.end_lr + (sched.peak_lr - sched.end_lr) * 0.5 * (1 + math.cos(math.pi))
    cont = max(abs(lr_at(warm, sched) - warm_limit), abs(lr_at(total, sched) - cos_limit))
    rng = np.random.default_rng(3)
    clip_err = 0.0
    for _ in range(200):
        grads = {"a": rng.standard_normal(7) * rng.uniform(0, 3), "b": rng.standard_normal((3, 4)) * rng.uniform(0, 3)}
        before = global_norm(grads)
        clipped, _ = clip_global_norm(grads, 2.5)
        clip_err = max(clip_err, abs(global_norm(clipped) - min(before, 2.5)))
    ok = max(ends) <= 1e-15 and cont <= 1e-15 and clip_err <= 1e-12
    verdict(6, "schedule and clipping", ok,
            f"endpoint err {max(ends):.1e}, continuity err {cont:.1e}, clip err {clip_err:.1e}")


def test_end_to_end_direction(verdict):
    cfg = TrainConfig.load(REFERENCE)
    t0 = time.perf_counter()
    report = P.run_ablations(cfg, variants=("direct", "no_ssl_no_ahnp", "full"), timestamps=False)
    elapsed = time.perf_counter() - t0
    rows = {r["variant"]: r for r in report["rows"]}
    direct, ablated, full = (rows[v]["auroc_mean"] for v in ("direct", "no_ssl_no_ahnp", "full"))
    margin = full - direct
    ok = margin >= 0.02 and ablated <= full and elapsed <= 900
    verdict(7, "alignment beats direct ECG", ok,
            f"direct {direct:.4f}, no-SSL/no-AHNP {ablated:.4f}, full {full:.4f}, "
            f"margin {100 * margin:+.2f} points, {elapsed:.0f}s")


def test_reproducible_run_all(verdict, tmp_path):
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        subprocess.run([sys.executable, "-m", "cromotex.cli", "run-all", "--config", str(REFERENCE),
                        "--deterministic", "--out-dir", str(out)], check=True, capture_output=True)
        outs.append(out)
    files = sorted(p.name for p in outs[0].iterdir())
    same = files == sorted(p.name for p in outs[1].iterdir()) and all(
        (outs[0] / f).read_bytes() == (outs[1] / f).read_bytes() for f in files)
    n_ckpt = sum(f.endswith(".ckpt") for f in files)
    verdict(8, "run-all reproducibility", same and n_ckpt == 4, f"{len(files)} files compared, {n_ckpt} checkpoints")


def test_freeze_and_hygiene(verdict):
    cfg = TrainConfig.load(SMOKE)
    dataset = generate_dataset(cfg.generator)
    splits = P.make_splits(cfg, dataset, 0)
    teacher, _ = P.train_teacher(cfg, splits, 0)
    encoder, _ = P.pretrain_ssl(cfg, splits, 0)
    before = {k: v.tobytes() for k, v in teacher.items()}
    aligned, _ = P.align_crossmodal(cfg, splits, encoder, teacher, 0)
    frozen = all(teacher[k].tobytes() == b and aligned[k].tobytes() == b for k, b in before.items())
    _, report = P.finetune(cfg, splits, aligned.without("proj_ecg", "proj_cxr", "teacher"), 0)
    once = splits.test_accesses == 1 == report.final_metrics["test_accesses"]
    runs = P.run_all(P.variant_config(cfg, "no_ssl"), dataset=dataset)["summary"]["test_accesses"]
    verdict(9, "teacher freeze and single test access", frozen and once and runs == 1,
            f"teacher bytes unchanged {frozen}, test accesses {splits.test_accesses}/{runs}")
