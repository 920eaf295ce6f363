"""Teacher training, ECG self-supervised pre-training, cross-modal alignment,
fine-tuning and the ablation runner.

Every stage is a pure function of (config, input parameters, seed): batches,
augmentations, dropout masks and initialisations all derive from
:func:`stage_seed`. Stage functions return ``(params, StageReport)``;
:func:`run_all` and :func:`run_ablations` chain them and optionally write
checkpoints, JSON reports and CSV curves.
"""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import logging
import time
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Optional

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .config import AblationConfig, StageConfig, TrainConfig
from .data import PairedDataset, generate_dataset, read_dataset, split_by_subject, split_indices, weighted_batches
from .losses import ahnp_supcma_loss, cross_entropy_loss, ntxent_loss, supcma_loss
from .metrics import auroc, best_f1_threshold, metric_report, seed_summary
from .model import (
    ModelParams, classifier_forward, ecg_encoder_forward, init_params, linear_head_forward,
    model_backward, projection_forward, teacher_forward,
)
from .optim import OptimizerState, ScheduleConfig, adaptive_moment_step, clip_global_norm, lr_at, param_group_scaling
from .signal import time_domain_augment, vcg_augment

log = logging.getLogger(__name__)

DTYPE = np.float32
VARIANTS = ("direct", "full", "no_ssl", "no_ahnp", "no_ssl_no_ahnp")
VARIANT_LABELS = {
    "direct": "direct ECG classifier",
    "no_ssl_no_ahnp": "aligned, no SSL, no AHNP",
    "no_ahnp": "aligned, no AHNP",
    "no_ssl": "aligned, no SSL",
    "full": "full pipeline",
}
CHECKPOINT_NAMES = {
    "teacher": "teacher.ckpt",
    "pretrain": "encoder_ssl.ckpt",
    "align": "aligned.ckpt",
    "finetune": "final.ckpt",
}


class InvariantViolation(RuntimeError):
    pass


def stage_seed(seed: int, name: str) -> int:
    """Independent 32-bit seed for a named stage or stream of an experiment."""
    return int(np.random.SeedSequence([seed, zlib.crc32(name.encode())]).generate_state(1)[0])


@dataclass
class StageReport:
    stage: str
    seed: int
    config_hash: str
    epochs: list = field(default_factory=list)
    best_epoch: int = -1
    final_metrics: dict = field(default_factory=dict)
    checkpoint: Optional[str] = None
    wall_clock_s: Optional[float] = None

    def to_dict(self, timestamps: bool = True) -> dict:
        d = dataclasses.asdict(self)
        if not timestamps:
            d.pop("wall_clock_s")
        return d

    def to_json(self, timestamps: bool = True) -> str:
        return json.dumps(self.to_dict(timestamps), indent=2, sort_keys=True) + "\n"

    def curve_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["epoch", "train_loss", "val_loss"])
        for row in self.epochs:
            writer.writerow([row["epoch"], repr(row["train_loss"]), repr(row["val_loss"])])
        return buf.getvalue()


class DataSplits:
    """Train/val views of a dataset; the test split is released through :meth:`test` only."""

    def __init__(self, dataset: PairedDataset, assignment: dict):
        idx = split_indices(dataset, assignment)
        self.assignment = assignment
        self.train = dataset.subset(idx["train"])
        self.val = dataset.subset(idx["val"])
        self._test = dataset.subset(idx["test"])
        self.test_accesses = 0

    def test(self) -> PairedDataset:
        self.test_accesses += 1
        return self._test


def load_dataset(cfg: TrainConfig) -> PairedDataset:
    if cfg.data_path:
        return read_dataset(cfg.data_path)
    return generate_dataset(cfg.generator)


def make_splits(cfg: TrainConfig, dataset: PairedDataset, seed: int) -> DataSplits:
    assignment = split_by_subject(dataset.subject_ids, cfg.split_fractions, stage_seed(seed, "split"))
    return DataSplits(dataset, assignment)


def params_digest(params: ModelParams, prefix: str = "") -> str:
    h = hashlib.sha256()
    for name, arr in params.items():
        if name.startswith(prefix):
            h.update(name.encode())
            h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------- generic loop

def _index_stream(labels, stage: StageConfig, seed: int) -> Iterable[np.ndarray]:
    if stage.minority_target is not None:
        yield from weighted_batches(labels, stage.batch_size, stage.minority_target, seed)
        return
    rng = np.random.default_rng(seed)
    n = len(labels)
    while True:
        order = rng.permutation(n)
        for start in range(0, n, stage.batch_size):
            yield order[start : start + stage.batch_size]


def _eval_chunks(n: int, batch_size: int):
    return np.array_split(np.arange(n), max(1, -(-n // batch_size)))


def _fit(name: str, params: ModelParams, stage: StageConfig, n_train: int, labels,
         step_fn: Callable, val_fn: Callable, seed: int, lr_groups: Optional[dict] = None):
    """Shared optimisation loop with per-epoch validation and best-val selection."""
    spe = max(1, -(-n_train // stage.batch_size))
    sched = ScheduleConfig(stage.start_lr, stage.peak_lr, stage.end_lr, stage.warmup_epochs, stage.epochs, spe)
    state = OptimizerState(lr=stage.peak_lr, weight_decay=stage.weight_decay, decoupled=stage.decoupled)
    batches = _index_stream(labels, stage, stage_seed(seed, name + "/batches"))
    step_rng = np.random.default_rng(stage_seed(seed, name + "/steps"))
    trainable = set(params.trainable_names())
    best_val, best_params, best_epoch = np.inf, params.copy(), -1
    rows = []
    step = 0
    for epoch in range(stage.epochs):
        losses = []
        for _ in range(spe):
            idx = next(batches)
            loss, grads, buffers = step_fn(params, idx, int(step_rng.integers(2**31)))
            grads = {k: v for k, v in grads.items() if k in trainable}
            if stage.clip_norm is not None:
                grads, _ = clip_global_norm(grads, stage.clip_norm)
            lr = lr_at(step, sched)
            state.lr = lr
            lrs = param_group_scaling(grads, lr_groups or {}, lr)
            adaptive_moment_step(params, grads, state, lrs)
            for k, v in buffers.items():
                params[k] = v.astype(params[k].dtype)
            losses.append(loss)
            step += 1
        val = float(val_fn(params))
        train_loss = float(np.mean(losses))
        rows.append({"epoch": epoch, "train_loss": train_loss, "val_loss": val, "lr_end": lr})
        log.info("%s epoch %d train %.5f val %.5f", name, epoch, train_loss, val)
        if not np.isfinite(train_loss):
            raise FloatingPointError(f"{name}: non-finite training loss at epoch {epoch}")
        if val < best_val:
            best_val, best_params, best_epoch = val, params.copy(), epoch
    if best_epoch < 0:
        best_params, best_epoch = params.copy(), stage.epochs - 1
    return best_params, rows, best_epoch, state


def _merge(*parts: ModelParams) -> ModelParams:
    out = ModelParams()
    for p in parts:
        out.update(p)
        out.frozen |= p.frozen
    return out


# ---------------------------------------------------------------- stages

def train_teacher(cfg: TrainConfig, splits: DataSplits, seed: int):
    """Train the second-modality teacher with cross-entropy, then freeze it."""
    train, val = splits.train, splits.val
    if len(np.unique(train.labels)) < 2:
        raise ValueError("teacher training split contains a single class")
    t0 = time.perf_counter()
    feats_dim = train.modality_b.shape[1]
    params = init_params(cfg.encoder, stage_seed(seed, "teacher/init"), teacher_in_dim=feats_dim,
                         parts=("teacher", "teacher_head"), dtype=DTYPE)

    def forward(p, feats):
        emb, tc = teacher_forward(p, feats)
        logits, hc = linear_head_forward(p, emb, "teacher_head")
        return logits, tc, hc

    def step_fn(p, idx, _):
        logits, tc, hc = forward(p, train.modality_b[idx])
        out = cross_entropy_loss(logits.astype(np.float64), train.labels[idx])
        g_head, d_emb = model_backward(p, hc, out.grads[0].astype(DTYPE), return_input_grad=True)
        g_teacher = model_backward(p, tc, d_emb)
        return out.value, {**g_head, **g_teacher}, {}

    def val_fn(p):
        logits, _, _ = forward(p, val.modality_b)
        return cross_entropy_loss(logits.astype(np.float64), val.labels).value

    best, rows, best_epoch, _ = _fit("teacher", params, cfg.teacher, len(train), train.labels,
                                     step_fn, val_fn, seed)
    logits, _, _ = forward(best, val.modality_b)
    metrics = {"val_auroc": _safe_auroc(_positive_prob(logits), val.labels)}
    teacher = best.subset("teacher")
    teacher.freeze("teacher")
    report = StageReport("teacher", seed, cfg.config_hash(), rows, best_epoch, metrics,
                         wall_clock_s=time.perf_counter() - t0)
    return teacher, report


def pretrain_ssl(cfg: TrainConfig, splits: DataSplits, seed: int):
    """SimCLR-style pre-training on VCG-augmented ECG views; the head is dropped afterwards."""
    stage = cfg.pretrain
    if stage.batch_size < 2:
        raise ValueError("SSL pre-training needs batch_size >= 2")
    train, val = splits.train.paired(), splits.val.paired()
    t0 = time.perf_counter()
    params = _merge(
        init_params(cfg.encoder, stage_seed(seed, "encoder/init"), dtype=DTYPE),
        init_params(cfg.encoder, stage_seed(seed, "ssl_head/init"), parts=("ssl_head",), dtype=DTYPE),
    )
    enc = cfg.encoder

    def views(x, s):
        rng = np.random.default_rng(s)
        a, b = (int(v) for v in rng.integers(2**31, size=2))
        return np.concatenate([vcg_augment(x, cfg.augment, a), vcg_augment(x, cfg.augment, b)]).astype(DTYPE)

    def step_fn(p, idx, s):
        if len(idx) < 2:
            idx = np.concatenate([idx, idx])
        x = views(train.ecg[idx], s)
        h, ec = ecg_encoder_forward(p, x, enc, "train")
        z, pc = projection_forward(p, h, "ssl_head")
        B = len(idx)
        out = ntxent_loss(z[:B].astype(np.float64), z[B:].astype(np.float64), cfg.ssl_tau)
        dz = np.concatenate(out.grads).astype(DTYPE)
        g_head, dh = model_backward(p, pc, dz, return_input_grad=True)
        g_enc = model_backward(p, ec, dh)
        return out.value, {**g_head, **g_enc}, ec["new_buffers"]

    def val_fn(p):
        losses = []
        for i, chunk in enumerate(_eval_chunks(len(val), stage.batch_size)):
            if len(chunk) < 2:
                continue
            x = views(val.ecg[chunk], stage_seed(seed, f"pretrain/val/{i}"))
            h, _ = ecg_encoder_forward(p, x, enc, "eval")
            z, _ = projection_forward(p, h, "ssl_head")
            B = len(chunk)
            losses.append(ntxent_loss(z[:B].astype(np.float64), z[B:].astype(np.float64), cfg.ssl_tau).value)
        return float(np.mean(losses)) if losses else np.nan

    best, rows, best_epoch, _ = _fit("pretrain", params, stage, len(train), train.labels, step_fn, val_fn, seed)
    encoder = best.subset("encoder")
    report = StageReport("pretrain", seed, cfg.config_hash(), rows, best_epoch,
                         {"best_val_loss": rows[best_epoch]["val_loss"]}, wall_clock_s=time.perf_counter() - t0)
    return encoder, report


def fresh_encoder(cfg: TrainConfig, seed: int) -> ModelParams:
    """The encoder initialisation pre-training would have started from."""
    return init_params(cfg.encoder, stage_seed(seed, "encoder/init"), dtype=DTYPE)


def alignment_loss(cfg: TrainConfig):
    if cfg.ablation.no_ahnp:
        return supcma_loss
    return ahnp_supcma_loss


def align_crossmodal(cfg: TrainConfig, splits: DataSplits, encoder: ModelParams, teacher: ModelParams, seed: int):
    """Align ECG projections with frozen-teacher projections (AHNP-SupCMA or SupCMA)."""
    if "teacher" not in teacher.frozen:
        raise InvariantViolation("the teacher must be frozen before alignment")
    stage = cfg.align
    train, val = splits.train.paired(), splits.val.paired()
    t0 = time.perf_counter()
    teacher_digest = params_digest(teacher, "teacher.")
    heads = init_params(cfg.encoder, stage_seed(seed, "heads/init"), parts=("proj_ecg", "proj_cxr"), dtype=DTYPE)
    params = _merge(encoder.copy(), heads, teacher.copy())
    enc = cfg.encoder
    loss_fn = alignment_loss(cfg)
    norm = cfg.normalize_projections
    t_train = teacher_forward(teacher, train.modality_b)[0]
    t_val = teacher_forward(teacher, val.modality_b)[0]

    def forward(p, x, t_emb, mode):
        h, ec = ecg_encoder_forward(p, x, enc, mode)
        ze, pe = projection_forward(p, h, "proj_ecg", norm)
        zx, px = projection_forward(p, t_emb, "proj_cxr", norm)
        keep = ~(pe["degenerate"] | px["degenerate"])
        return ze, zx, keep, ec, pe, px

    def step_fn(p, idx, s):
        x = time_domain_augment(train.ecg[idx], cfg.augment, s).astype(DTYPE)
        ze, zx, keep, ec, pe, px = forward(p, x, t_train[idx], "train")
        out = loss_fn(ze[keep].astype(np.float64), zx[keep].astype(np.float64), train.labels[idx][keep], cfg.ahnp)
        dze = np.zeros_like(ze)
        dzx = np.zeros_like(zx)
        dze[keep] = out.grad_e
        dzx[keep] = out.grad_x
        g_px = model_backward(p, px, dzx)
        g_pe, dh = model_backward(p, pe, dze, return_input_grad=True)
        g_enc = model_backward(p, ec, dh)
        return out.value, {**g_px, **g_pe, **g_enc}, ec["new_buffers"]

    def val_fn(p):
        losses = []
        for chunk in _eval_chunks(len(val), stage.batch_size):
            ze, zx, keep, *_ = forward(p, val.ecg[chunk], t_val[chunk], "eval")
            losses.append(loss_fn(ze[keep].astype(np.float64), zx[keep].astype(np.float64),
                                  val.labels[chunk][keep], cfg.ahnp).value)
        return float(np.mean(losses))

    groups = {"encoder": 1.0, "proj_ecg": stage.head_lr_scale, "proj_cxr": stage.head_lr_scale}
    best, rows, best_epoch, _ = _fit("align", params, stage, len(train), train.labels, step_fn, val_fn, seed, groups)
    if params_digest(best, "teacher.") != teacher_digest or params_digest(params, "teacher.") != teacher_digest:
        raise InvariantViolation("teacher parameters changed during alignment")
    metrics = {
        "best_val_loss": rows[best_epoch]["val_loss"],
        "loss": "supcma" if cfg.ablation.no_ahnp else "ahnp_supcma",
        "teacher_digest": teacher_digest,
    }
    report = StageReport("align", seed, cfg.config_hash(), rows, best_epoch, metrics,
                         wall_clock_s=time.perf_counter() - t0)
    return best, report


def _positive_prob(logits) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    return 1.0 / (1.0 + np.exp(logits[:, 0] - logits[:, 1]))


def _safe_auroc(scores, labels):
    return auroc(scores, labels) if len(np.unique(labels)) == 2 else None


def predict_proba(params: ModelParams, ecg, cfg: TrainConfig, batch_size: int = 256) -> np.ndarray:
    """Positive-class probabilities of an encoder + classifier in eval mode."""
    out = []
    for chunk in _eval_chunks(len(ecg), batch_size):
        if len(chunk) == 0:
            continue
        h, _ = ecg_encoder_forward(params, ecg[chunk], cfg.encoder, "eval")
        logits, _ = classifier_forward(params, h, cfg.encoder, "eval")
        out.append(_positive_prob(logits))
    return np.concatenate(out) if out else np.zeros(0)


def finetune(cfg: TrainConfig, splits: DataSplits, encoder: ModelParams, seed: int, evaluate_test: bool = True):
    """Attach a classifier to the encoder, train with cross-entropy, evaluate once on test."""
    encoder = encoder.subset("encoder")
    stage = cfg.finetune
    train, val = splits.train.paired(), splits.val.paired()
    if len(np.unique(train.labels)) < 2:
        raise ValueError("fine-tuning split contains a single class")
    t0 = time.perf_counter()
    head = init_params(cfg.encoder, stage_seed(seed, "classifier/init"), parts=("classifier",), dtype=DTYPE)
    params = _merge(encoder.copy(), head)
    enc = cfg.encoder

    def step_fn(p, idx, s):
        h, ec = ecg_encoder_forward(p, train.ecg[idx], enc, "train")
        logits, cc = classifier_forward(p, h, enc, "train", seed=s)
        out = cross_entropy_loss(logits.astype(np.float64), train.labels[idx])
        g_cls, dh = model_backward(p, cc, out.grads[0].astype(DTYPE), return_input_grad=True)
        g_enc = model_backward(p, ec, dh)
        return out.value, {**g_cls, **g_enc}, ec["new_buffers"]

    def val_fn(p):
        prob = np.clip(predict_proba(p, val.ecg, cfg, stage.batch_size), 1e-12, 1 - 1e-12)
        y = val.labels
        return float(-np.mean(y * np.log(prob) + (1 - y) * np.log(1 - prob)))

    best, rows, best_epoch, _ = _fit("finetune", params, stage, len(train), train.labels, step_fn, val_fn, seed,
                                     {"classifier": stage.head_lr_scale})
    val_prob = predict_proba(best, val.ecg, cfg, stage.batch_size)
    metrics = {"val_auroc": _safe_auroc(val_prob, val.labels)}
    if evaluate_test:
        threshold, mode = 0.5, "fixed"
        if cfg.threshold_mode == "val_f1":
            threshold, mode = best_f1_threshold(val_prob, val.labels), "val_f1"
        test = splits.test().paired()
        prob = predict_proba(best, test.ecg, cfg, stage.batch_size)
        metrics["test"] = metric_report(prob, test.labels, threshold, mode).to_dict()
    metrics["test_accesses"] = splits.test_accesses
    report = StageReport("finetune", seed, cfg.config_hash(), rows, best_epoch, metrics,
                         wall_clock_s=time.perf_counter() - t0)
    return best, report


# ---------------------------------------------------------------- chaining

def variant_config(cfg: TrainConfig, variant: str) -> TrainConfig:
    """Effective config of an ablation variant; variants differ only in ``ablation``."""
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    if variant in ("direct", "full"):
        flags = AblationConfig()
    else:
        flags = AblationConfig(no_ssl="no_ssl" in variant, no_ahnp="no_ahnp" in variant)
    return cfg.replace(ablation=flags)


def write_stage(out_dir: Optional[Path], stage: str, params: ModelParams, report: StageReport,
                 cfg: TrainConfig, timestamps: bool):
    if out_dir is None:
        return
    name = CHECKPOINT_NAMES[stage]
    save_checkpoint(out_dir / name, params, cfg.to_dict(), {"stage": stage, "seed": report.seed})
    report.checkpoint = name
    (out_dir / f"{stage}_report.json").write_text(report.to_json(timestamps))
    (out_dir / f"{stage}_curve.csv").write_text(report.curve_csv())


def write_resolved_config(out_dir: Path, cfg: TrainConfig) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "resolved_config.json").write_text(cfg.to_json())


def run_all(cfg: TrainConfig, out_dir=None, seed: Optional[int] = None, timestamps: bool = True,
            dataset: Optional[PairedDataset] = None) -> dict:
    """Algorithm chain for one seed, honouring ``cfg.ablation``; returns the reports."""
    seed = cfg.seed if seed is None else seed
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        write_resolved_config(out_dir, cfg)
    dataset = load_dataset(cfg) if dataset is None else dataset
    splits = make_splits(cfg, dataset, seed)
    reports = {}

    teacher, reports["teacher"] = train_teacher(cfg, splits, seed)
    write_stage(out_dir, "teacher", teacher, reports["teacher"], cfg, timestamps)
    if cfg.ablation.no_ssl:
        encoder = fresh_encoder(cfg, seed)
    else:
        encoder, reports["pretrain"] = pretrain_ssl(cfg, splits, seed)
        write_stage(out_dir, "pretrain", encoder, reports["pretrain"], cfg, timestamps)
    aligned, reports["align"] = align_crossmodal(cfg, splits, encoder, teacher, seed)
    write_stage(out_dir, "align", aligned, reports["align"], cfg, timestamps)
    final, reports["finetune"] = finetune(cfg, splits, aligned.without("proj_ecg", "proj_cxr", "teacher"), seed)
    write_stage(out_dir, "finetune", final, reports["finetune"], cfg, timestamps)
    summary = {
        "config_hash": cfg.config_hash(),
        "seed": seed,
        "ablation": dataclasses.asdict(cfg.ablation),
        "test": reports["finetune"].final_metrics["test"],
        "test_accesses": splits.test_accesses,
        "stages": list(reports),
    }
    if out_dir is not None:
        (out_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return {"summary": summary, "reports": reports}


def run_variant_seed(cfg: TrainConfig, dataset: PairedDataset, seed: int, variants: Iterable[str]) -> dict:
    """Run several variants for one seed, sharing the teacher and SSL encoder."""
    variants = list(variants)
    results = {}
    teacher = ssl_encoder = None
    for variant in variants:
        vcfg = variant_config(cfg, variant)
        splits = make_splits(vcfg, dataset, seed)
        t0 = time.perf_counter()
        teacher_loaded = False
        if variant == "direct":
            encoder = fresh_encoder(vcfg, seed)
        else:
            if teacher is None:
                teacher, _ = train_teacher(vcfg, splits, seed)
            teacher_loaded = True
            if vcfg.ablation.no_ssl:
                encoder = fresh_encoder(vcfg, seed)
            else:
                if ssl_encoder is None:
                    ssl_encoder, _ = pretrain_ssl(vcfg, splits, seed)
                encoder = ssl_encoder
            encoder, _ = align_crossmodal(vcfg, splits, encoder, teacher, seed)
        _, report = finetune(vcfg, splits, encoder, seed)
        test = report.final_metrics["test"]
        results[variant] = {
            "seed": seed,
            "auroc": test["auroc"],
            "f1": test["f1"],
            "teacher_loaded": teacher_loaded,
            "test_accesses": splits.test_accesses,
            "seconds": time.perf_counter() - t0,
        }
        log.info("seed %d %s auroc %.4f f1 %.4f", seed, variant, test["auroc"], test["f1"])
    return results


def run_ablations(cfg: TrainConfig, variants: Iterable[str] = VARIANTS, seeds: Optional[Iterable[int]] = None,
                  dataset: Optional[PairedDataset] = None, timestamps: bool = True) -> dict:
    """Variant comparison: mean and sample std of test AUROC/F1 per variant."""
    variants = [v for v in VARIANTS if v in set(variants)]
    seeds = list(cfg.seeds if seeds is None else seeds)
    dataset = load_dataset(cfg) if dataset is None else dataset
    runs = {v: [] for v in variants}
    for seed in seeds:
        for variant, res in run_variant_seed(cfg, dataset, seed, variants).items():
            if not timestamps:
                res.pop("seconds")
            runs[variant].append(res)
    rows = []
    for variant in ("direct", "no_ssl_no_ahnp", "no_ahnp", "no_ssl", "full"):
        if variant not in runs:
            continue
        au_mean, au_std = seed_summary([r["auroc"] for r in runs[variant]])
        f1_mean, f1_std = seed_summary([r["f1"] for r in runs[variant]])
        rows.append({
            "variant": variant,
            "label": VARIANT_LABELS[variant],
            "auroc_mean": au_mean, "auroc_std": au_std,
            "f1_mean": f1_mean, "f1_std": f1_std,
            "runs": runs[variant],
        })
    return {"config_hash": cfg.config_hash(), "seeds": seeds, "dispersion": "sample std (n-1)", "rows": rows}


def evaluate_checkpoint(cfg: TrainConfig, path, seed: Optional[int] = None,
                        dataset: Optional[PairedDataset] = None) -> dict:
    """Score a fine-tuned checkpoint on the test split of ``seed``."""
    seed = cfg.seed if seed is None else seed
    params, _, _ = load_checkpoint(path)
    if "classifier.0.weight" not in params:
        raise ValueError(f"{path} has no classifier; evaluate a fine-tuned checkpoint")
    dataset = load_dataset(cfg) if dataset is None else dataset
    splits = make_splits(cfg, dataset, seed)
    test = splits.test().paired()
    prob = predict_proba(params, test.ecg, cfg)
    report = metric_report(prob, test.labels).to_dict()
    report["test_accesses"] = splits.test_accesses
    return report
