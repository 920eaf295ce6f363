"""Cross-modal contrastive objectives with exact gradients.

Every loss returns a :class:`LossOutput` holding the scalar value and the
gradient with respect to each input matrix, so the training loops never need
an autodiff engine. All computations run in the dtype of the inputs; use
float64 for gradient checks.

Directional terms share one formulation. For anchor ``i`` in modality ``m``
and candidates ``a`` in modality ``n``::

    l_i = log sum_{a in A(i)} w_ia exp(s_ia / tau)
          - 1/|P(i)| sum_{p in P(i)} [log c_ip + s_ip / tau]

with ``s = z_m @ z_n.T``. CMA uses ``P(i) = {i}``, unit weights and ``c = 1``;
SupCMA uses label-matched positives; the AHNP variant adds hard negative
weights ``w`` and the within-sample factor ``c_ii = 1 + beta``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit, logsumexp

STRATEGIES = ("linear", "topk", "exp")
WEIGHT_SCOPES = ("negatives_only", "all")
REDUCTIONS = ("sum", "mean")


@dataclass(frozen=True)
class AhnpConfig:
    """Hyperparameters shared by the cross-modal losses.

    ``alpha``, ``k_percent`` and ``beta`` only matter for
    :func:`ahnp_supcma_loss`; ``tau``, ``include_self`` and ``reduction`` apply
    to all three cross-modal objectives.
    """

    strategy: str = "topk"
    alpha: float = 4.5
    k_percent: float = 7.5
    beta: float = 2.0
    tau: float = 0.01
    weight_scope: str = "negatives_only"
    include_self: bool = True
    reduction: str = "mean"
    empty_positive: str = "skip"

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if self.weight_scope not in WEIGHT_SCOPES:
            raise ValueError(f"weight_scope must be one of {WEIGHT_SCOPES}, got {self.weight_scope!r}")
        if self.reduction not in REDUCTIONS:
            raise ValueError(f"reduction must be one of {REDUCTIONS}, got {self.reduction!r}")
        if self.empty_positive not in ("skip", "error"):
            raise ValueError("empty_positive must be 'skip' or 'error'")
        if not self.tau > 0:
            raise ValueError("tau must be > 0")
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if self.strategy in ("linear", "topk") and self.alpha < 1:
            raise ValueError(f"alpha must be >= 1 for strategy {self.strategy!r}")
        if self.strategy == "exp" and self.alpha < 0:
            raise ValueError("alpha must be >= 0 for strategy 'exp'")
        if self.strategy == "topk" and not 0 < self.k_percent <= 100:
            raise ValueError("k_percent must lie in (0, 100]")


@dataclass
class LossOutput:
    """Scalar loss plus one gradient array per differentiable input."""

    value: float
    grads: tuple = field(default_factory=tuple)

    @property
    def grad_e(self) -> np.ndarray:
        return self.grads[0]

    @property
    def grad_x(self) -> np.ndarray:
        return self.grads[1]


def _check_pair(a, b):
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"embedding batches must be 2-D, got shapes {a.shape} and {b.shape}")
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.shape[0] < 1 or a.shape[1] < 1:
        raise ValueError("embedding batches must have B >= 1 and d >= 1")
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise ValueError("embedding batches contain non-finite values")
    return a, b


def _check_labels(labels, n):
    labels = np.asarray(labels).reshape(-1)
    if labels.shape[0] != n:
        raise ValueError(f"expected {n} labels, got {labels.shape[0]}")
    return labels


def similarity_matrix(a, b) -> np.ndarray:
    """Pairwise dot products, ``out[i, j] = a[i] . b[j]``."""
    a, b = _check_pair(a, b)
    return a @ b.T


def _top_count(k_percent: float, n: int) -> int:
    # round() guards against 7.5 * 40 / 100 landing at 3.0000000000000004
    return max(1, math.ceil(round(k_percent * n / 100.0, 9)))


def _rank_weights(sims, cfg: AhnpConfig):
    """Weights for one anchor's weighted elements (piecewise-constant strategies)."""
    n = sims.shape[0]
    if cfg.strategy == "linear":
        # stable sort: equal similarities rank by ascending index
        order = np.argsort(sims, kind="stable")
        ranks = np.empty(n, dtype=np.float64)
        ranks[order] = np.arange(n)
        if n == 1:
            return np.full(1, cfg.alpha)
        return 1.0 + (cfg.alpha - 1.0) * ranks / (n - 1)
    order = np.lexsort((np.arange(n), -sims))
    w = np.ones(n, dtype=np.float64)
    w[order[: _top_count(cfg.k_percent, n)]] = cfg.alpha
    return w


def ahnp_weights(anchor_row_sims, neg_mask, cfg: AhnpConfig) -> np.ndarray:
    """Hard negative weights for one anchor.

    ``anchor_row_sims`` are raw (not temperature-scaled) similarities between
    the anchor and every candidate in its denominator set. ``neg_mask`` flags
    the negatives; with ``weight_scope='negatives_only'`` the remaining
    entries keep weight 1 and do not take part in ranking.
    """
    sims = np.asarray(anchor_row_sims, dtype=np.float64).reshape(-1)
    neg_mask = np.asarray(neg_mask, dtype=bool).reshape(-1)
    if sims.size == 0:
        raise ValueError("ahnp_weights needs at least one similarity")
    if neg_mask.shape != sims.shape:
        raise ValueError("neg_mask must match the similarity vector")
    if not np.all(np.isfinite(sims)):
        raise ValueError("non-finite similarity")
    weighted = neg_mask if cfg.weight_scope == "negatives_only" else np.ones_like(neg_mask)
    w = np.ones_like(sims)
    if not weighted.any():
        return w
    if cfg.strategy == "exp":
        w[weighted] = 1.0 + np.exp(cfg.alpha * sims[weighted])
    else:
        w[weighted] = _rank_weights(sims[weighted], cfg)
    return w


def _directional(sim, labels, cfg: AhnpConfig, *, supervised: bool, weighted: bool):
    """Per-anchor terms, validity mask and d(sum of terms)/d(sim) for one direction."""
    B = sim.shape[0]
    dtype = sim.dtype
    allowed = np.ones((B, B), dtype=bool)
    if not cfg.include_self:
        np.fill_diagonal(allowed, False)
    if not allowed.any(axis=1).all():
        raise ValueError("empty denominator: include_self=False needs a batch of at least 2")
    eye = np.eye(B, dtype=bool)
    if supervised:
        same = labels[:, None] == labels[None, :]
        pos = allowed & same
    else:
        same = eye
        pos = eye

    log_w = np.zeros((B, B), dtype=dtype)
    dlog_w = np.zeros((B, B), dtype=dtype)
    if weighted:
        neg = allowed & ~same
        scope = neg if cfg.weight_scope == "negatives_only" else allowed
        if cfg.strategy == "exp":
            z = cfg.alpha * sim
            log_w = np.where(scope, np.logaddexp(0.0, z), 0.0).astype(dtype)
            dlog_w = np.where(scope, cfg.alpha * expit(z), 0.0).astype(dtype)
        else:
            for i in range(B):
                cols = np.flatnonzero(scope[i])
                if cols.size:
                    log_w[i, cols] = np.log(_rank_weights(sim[i, cols].astype(np.float64), cfg))

    logits = np.where(allowed, sim / cfg.tau + log_w, -np.inf)
    log_den = logsumexp(logits, axis=1)
    q = np.where(allowed, np.exp(logits - log_den[:, None]), 0.0)

    n_pos = pos.sum(axis=1)
    valid = n_pos > 0
    if not valid.all() and cfg.empty_positive == "error":
        raise ValueError(f"anchors without positives: {np.flatnonzero(~valid).tolist()}")
    safe_n = np.where(valid, n_pos, 1).astype(dtype)

    numer = sim / cfg.tau
    if weighted and cfg.beta:
        numer = numer + np.where(eye, math.log1p(cfg.beta), 0.0)
    per_anchor = log_den - np.where(pos, numer, 0.0).sum(axis=1) / safe_n
    dsim = q * (1.0 / cfg.tau + dlog_w) - pos / (safe_n[:, None] * cfg.tau)
    per_anchor = np.where(valid, per_anchor, np.nan)
    dsim[~valid] = 0.0
    return per_anchor, valid, dsim


def _symmetric(ze, zx, labels, cfg, *, supervised, weighted) -> LossOutput:
    ze, zx = _check_pair(ze, zx)
    B = ze.shape[0]
    labels = _check_labels(labels, B) if supervised else None
    sim = ze @ zx.T
    total = 0.0
    grad_e = np.zeros_like(ze)
    grad_x = np.zeros_like(zx)
    for direction_sim, anchors, cands, g_anchor, g_cand in (
        (sim, ze, zx, grad_e, grad_x),
        (sim.T, zx, ze, grad_x, grad_e),
    ):
        per_anchor, valid, dsim = _directional(
            np.ascontiguousarray(direction_sim), labels, cfg,
            supervised=supervised, weighted=weighted,
        )
        n_valid = int(valid.sum())
        if n_valid == 0:
            continue
        scale = 0.5 if cfg.reduction == "sum" else 0.5 / n_valid
        total += scale * float(per_anchor[valid].sum())
        dsim *= scale
        g_anchor += dsim @ cands
        g_cand += dsim.T @ anchors
    return LossOutput(total, (grad_e, grad_x))


def cma_loss(ze, zx, cfg: AhnpConfig = AhnpConfig()) -> LossOutput:
    """Symmetric cross-modal InfoNCE; the within-sample pair is the only positive."""
    return _symmetric(ze, zx, None, cfg, supervised=False, weighted=False)


def supcma_loss(ze, zx, labels, cfg: AhnpConfig = AhnpConfig()) -> LossOutput:
    """Label-supervised symmetric cross-modal contrastive loss."""
    return _symmetric(ze, zx, labels, cfg, supervised=True, weighted=False)


def ahnp_supcma_loss(ze, zx, labels, cfg: AhnpConfig = AhnpConfig()) -> LossOutput:
    """SupCMA with adaptive hard negative weights and within-sample emphasis.

    Rank-based weights (``linear``/``topk``) are constants of the forward
    pass; ``exp`` weights are differentiated exactly.
    """
    return _symmetric(ze, zx, labels, cfg, supervised=True, weighted=True)


def directional_terms(zm, zn, labels, cfg: AhnpConfig, kind: str = "ahnp") -> np.ndarray:
    """Per-anchor terms of the ``m -> n`` direction; skipped anchors are NaN."""
    zm, zn = _check_pair(zm, zn)
    if kind not in ("cma", "supcma", "ahnp"):
        raise ValueError(f"unknown kind {kind!r}")
    labels = None if kind == "cma" else _check_labels(labels, zm.shape[0])
    per_anchor, _, _ = _directional(
        zm @ zn.T, labels, cfg, supervised=kind != "cma", weighted=kind == "ahnp"
    )
    return per_anchor


def ntxent_loss(view1, view2, tau: float = 0.1) -> LossOutput:
    """NT-Xent over ``2B`` views; each view's positive is its partner view."""
    view1 = np.asarray(view1)
    view2 = np.asarray(view2)
    if view1.ndim != 2 or view1.shape != view2.shape:
        raise ValueError(f"views must be equal-shape 2-D arrays, got {view1.shape} and {view2.shape}")
    B = view1.shape[0]
    if B == 0:
        raise ValueError("ntxent_loss needs at least one pair")
    if not tau > 0:
        raise ValueError("tau must be > 0")
    z = np.concatenate([view1, view2], axis=0)
    n = 2 * B
    logits = (z @ z.T) / tau
    np.fill_diagonal(logits, -np.inf)
    partner = np.concatenate([np.arange(B, n), np.arange(B)])
    log_den = logsumexp(logits, axis=1)
    losses = log_den - logits[np.arange(n), partner]
    prob = np.exp(logits - log_den[:, None])
    prob[np.arange(n), partner] -= 1.0
    g_logits = prob / (n * tau)
    gz = (g_logits + g_logits.T) @ z
    return LossOutput(float(losses.mean()), (gz[:B], gz[B:]))


def cross_entropy_loss(logits, labels) -> LossOutput:
    """Mean softmax cross-entropy for two-class logits."""
    logits = np.asarray(logits)
    labels = np.asarray(labels).astype(np.int64).reshape(-1)
    if logits.ndim != 2 or logits.shape[0] != labels.shape[0]:
        raise ValueError(f"logits {logits.shape} do not match {labels.shape[0]} labels")
    B = logits.shape[0]
    log_norm = logsumexp(logits, axis=1)
    log_p = logits - log_norm[:, None]
    value = -log_p[np.arange(B), labels].mean()
    grad = np.exp(log_p)
    grad[np.arange(B), labels] -= 1.0
    return LossOutput(float(value), (grad / B,))


@dataclass
class GradCheckReport:
    max_rel_err: float
    max_abs_err: float
    tol: float
    n_coords: int

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tol


def finite_diff_check(
    loss_fn: Callable,
    inputs: Sequence[np.ndarray],
    h: float = 1e-5,
    tol: float = 1e-4,
    max_coords: int | None = None,
    seed: int = 0,
    coords: Sequence[np.ndarray] | None = None,
) -> GradCheckReport:
    """Compare analytic gradients against central differences.

    ``loss_fn(*inputs)`` must return ``(value, grads)`` (or a
    :class:`LossOutput`) with one gradient per input. Differences are formed
    in extended precision. The relative error of each coordinate is
    ``|a - n| / max(|a|, |n|, 1e-3 * max|a|)`` so that coordinates with
    negligible gradient do not dominate. ``max_coords`` checks a seeded random
    subset of coordinates per input; ``coords`` instead gives explicit flat
    indices per input.
    """
    if not h > 0:
        raise ValueError("h must be > 0")
    inputs = [np.array(x, dtype=np.float64, copy=True) for x in inputs]

    def call(xs):
        out = loss_fn(*xs)
        if isinstance(out, LossOutput):
            return out.value, out.grads
        return out

    value, grads = call(inputs)
    again, _ = call([x.copy() for x in inputs])
    if np.float64(value).tobytes() != np.float64(again).tobytes():
        raise RuntimeError("loss_fn is not deterministic: repeated evaluation differs")

    rng = np.random.default_rng(seed)
    scale = max(float(np.max(np.abs(g))) if np.size(g) else 0.0 for g in grads)
    floor = max(1e-3 * scale, 1e-12)
    max_rel = 0.0
    max_abs = 0.0
    count = 0
    for k, x in enumerate(inputs):
        g = np.asarray(grads[k], dtype=np.float64).reshape(-1)
        flat = x.reshape(-1)
        if coords is not None:
            picked = np.asarray(coords[k], dtype=np.int64)
        else:
            picked = np.arange(flat.size)
            if max_coords is not None and flat.size > max_coords:
                picked = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        for c in picked:
            orig = flat[c]
            flat[c] = orig + h
            f_plus = np.longdouble(call(inputs)[0])
            flat[c] = orig - h
            f_minus = np.longdouble(call(inputs)[0])
            flat[c] = orig
            numeric = float((f_plus - f_minus) / (2 * np.longdouble(h)))
            err = abs(g[c] - numeric)
            max_abs = max(max_abs, err)
            max_rel = max(max_rel, err / max(abs(g[c]), abs(numeric), floor))
            count += 1
    return GradCheckReport(max_rel, max_abs, tol, count)
