"""Finite-difference gradient suite over every loss and a composed tiny model."""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .losses import (
    AhnpConfig, ahnp_supcma_loss, cma_loss, cross_entropy_loss, finite_diff_check, ntxent_loss, supcma_loss,
)
from .model import (
    EncoderConfig, ModelParams, classifier_forward, ecg_encoder_forward, init_params, model_backward,
    projection_forward,
)

TINY_ENCODER = EncoderConfig(
    kernel_size=3, stride1=1, stride2=1, intermediate_dim=4, embed_dim=8, num_heads=1, num_layers=1,
    ffn_dim=16, classifier_dim=8, classifier_layers=2, proj_dim=4, teacher_hidden=8, input_length=24,
)
LOSS_TOL = 1e-4
MODEL_TOL = 1e-3


@dataclass
class GradRow:
    name: str
    seeds: int
    max_rel_err: float
    tol: float

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_err <= self.tol)

    def to_dict(self) -> dict:
        return {"name": self.name, "seeds": self.seeds, "max_rel_err": self.max_rel_err,
                "tol": self.tol, "passed": self.passed}


def _rows(rng, b, d):
    z = rng.standard_normal((b, d))
    return z / np.linalg.norm(z, axis=1, keepdims=True)


def _labels(rng, b):
    y = rng.integers(0, 2, b)
    y[:2] = (0, 1)
    return y


def loss_cases():
    """(name, builder) pairs; ``builder(seed)`` returns ``(loss_fn, inputs)``."""
    base = AhnpConfig()

    def contrastive(fn, cfg, supervised=True):
        def build(seed):
            rng = np.random.default_rng(seed)
            ze, zx, y = _rows(rng, 8, 6), _rows(rng, 8, 6), _labels(rng, 8)
            if supervised:
                return (lambda a, b: fn(a, b, y, cfg)), [ze, zx]
            return (lambda a, b: fn(a, b, cfg)), [ze, zx]
        return build

    cases = [("cma_loss", contrastive(cma_loss, base, supervised=False)),
             ("supcma_loss", contrastive(supcma_loss, base))]
    for strategy in ("exp", "topk", "linear"):
        for scope in ("negatives_only", "all"):
            cfg = replace(base, strategy=strategy, weight_scope=scope)
            cases.append((f"ahnp_supcma_loss[{strategy},{scope}]", contrastive(ahnp_supcma_loss, cfg)))

    def ntxent(seed):
        rng = np.random.default_rng(seed)
        return (lambda a, b: ntxent_loss(a, b, 0.1)), [_rows(rng, 6, 5), _rows(rng, 6, 5)]

    def xent(seed):
        rng = np.random.default_rng(seed)
        y = _labels(rng, 7)
        return (lambda z: cross_entropy_loss(z, y)), [rng.standard_normal((7, 2))]

    cases += [("ntxent_loss", ntxent), ("cross_entropy_loss", xent)]
    return cases


def _relu_pattern(enc_cache, cls_cache) -> bytes:
    masks = [enc_cache["relu1"], enc_cache["relu2"]]
    masks += [layer["relu"] for layer in cls_cache["layers"] if "relu" in layer]
    return b"".join(np.packbits(m).tobytes() for m in masks)


def composed_model_case(seed: int, batch: int = 6):
    """Encoder (train-mode batch norm) -> projection -> AHNP loss, plus a classifier CE branch.

    ``loss_fn.pattern(*arrays)`` returns the ReLU on/off pattern, used to keep
    finite differences away from kinks.
    """
    cfg = TINY_ENCODER
    params = init_params(cfg, seed, parts=("encoder", "proj_ecg", "classifier"))
    rng = np.random.default_rng([seed, 99])
    x = rng.standard_normal((batch, cfg.in_leads, cfg.input_length))
    zx = _rows(rng, batch, cfg.proj_dim)
    y = _labels(rng, batch)
    ahnp = AhnpConfig(strategy="exp", tau=0.1)
    names = params.trainable_names()
    buffers = {k: v for k, v in params.items() if k not in names}

    def forward(arrays):
        p = ModelParams(buffers)
        p.update(zip(names, arrays))
        h, enc_cache = ecg_encoder_forward(p, x, cfg, "train")
        ze, proj_cache = projection_forward(p, h, "proj_ecg")
        logits, cls_cache = classifier_forward(p, h, cfg, "train", seed=seed)
        return p, ze, logits, enc_cache, proj_cache, cls_cache

    def loss_fn(*arrays):
        p, ze, logits, enc_cache, proj_cache, cls_cache = forward(arrays)
        contrast = ahnp_supcma_loss(ze, zx, y, ahnp)
        xent = cross_entropy_loss(logits, y)
        g_proj, dh1 = model_backward(p, proj_cache, contrast.grad_e, return_input_grad=True)
        g_cls, dh2 = model_backward(p, cls_cache, xent.grads[0], return_input_grad=True)
        g_enc = model_backward(p, enc_cache, dh1 + dh2)
        grads = {**g_proj, **g_cls, **g_enc}
        return contrast.value + xent.value, [grads[n] for n in names]

    def pattern(*arrays):
        _, _, _, enc_cache, _, cls_cache = forward(arrays)
        return _relu_pattern(enc_cache, cls_cache)

    loss_fn.pattern = pattern
    return loss_fn, [params[n] for n in names]


def smooth_coords(pattern_fn, inputs, h: float, per_input: int, seed: int) -> list:
    """Seeded coordinates per input whose +-h perturbation leaves the ReLU pattern unchanged.

    Central differences straddling a kink measure an average of two one-sided
    slopes, not the gradient, so such coordinates are skipped.
    """
    rng = np.random.default_rng(seed)
    base = pattern_fn(*inputs)
    picked = []
    for k, x in enumerate(inputs):
        chosen = []
        for c in rng.permutation(x.size):
            same = True
            for step in (h, -h):
                moved = [a.copy() for a in inputs]
                moved[k].reshape(-1)[c] += step
                if pattern_fn(*moved) != base:
                    same = False
                    break
            if same:
                chosen.append(c)
                if len(chosen) == per_input:
                    break
        picked.append(np.sort(np.array(chosen, dtype=np.int64)))
    return picked


def run_suite(n_seeds: int = 20, include_model: bool = True, model_coords: int = 8, first_seed: int = 0) -> list:
    """Max relative error per case over seeds ``first_seed .. first_seed + n_seeds - 1`` (h = 1e-5, 64-bit)."""
    seeds = range(first_seed, first_seed + n_seeds)
    rows = []
    for name, build in loss_cases():
        worst = 0.0
        for seed in seeds:
            fn, inputs = build(seed)
            worst = max(worst, finite_diff_check(fn, inputs, h=1e-5, tol=LOSS_TOL, seed=seed).max_rel_err)
        rows.append(GradRow(name, n_seeds, float(worst), LOSS_TOL))
    if include_model:
        worst = 0.0
        for seed in seeds:
            fn, inputs = composed_model_case(seed)
            coords = smooth_coords(fn.pattern, inputs, 1e-5, model_coords, seed)
            report = finite_diff_check(fn, inputs, h=1e-5, tol=MODEL_TOL, seed=seed, coords=coords)
            worst = max(worst, report.max_rel_err)
        rows.append(GradRow("composed_tiny_model", n_seeds, float(worst), MODEL_TOL))
    return rows


def format_table(rows) -> str:
    width = max(len(r.name) for r in rows)
    lines = [f"{'case':<{width}}  seeds  max_rel_err  tol     result"]
    for r in rows:
        lines.append(f"{r.name:<{width}}  {r.seeds:>5}  {r.max_rel_err:11.3e}  {r.tol:.0e}  {'PASS' if r.passed else 'FAIL'}")
    return "\n".join(lines)
