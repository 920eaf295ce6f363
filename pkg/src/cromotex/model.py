"""ECG encoder, projection heads, classifier and frozen teacher.

Parameters live in a :class:`ModelParams` mapping with dotted names
(``encoder.blocks.0.attn.qkv.weight`` ...). Forward passes return an output
and a cache; :func:`model_backward` turns a cache and an upstream gradient
into a gradient dict keyed like the parameters.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Iterable, Optional

import numpy as np

from . import layers as L

BUFFER_SUFFIXES = (".running_mean", ".running_var")


class FrozenParameterError(RuntimeError):
    """Raised when a gradient or update targets a frozen tensor."""


class NonFiniteActivationError(FloatingPointError):
    def __init__(self, layer: str):
        super().__init__(f"non-finite activation in layer {layer!r}")
        self.layer = layer


@dataclass(frozen=True)
class EncoderConfig:
    kernel_size: int = 5
    stride1: int = 5
    stride2: int = 1
    intermediate_dim: int = 128
    embed_dim: int = 256
    num_heads: int = 8
    num_layers: int = 4
    ffn_dim: int = 512
    classifier_dim: int = 256
    classifier_layers: int = 4
    classifier_dropout: float = 0.1
    proj_dim: int = 128
    teacher_hidden: int = 128
    in_leads: int = 12
    input_length: int = 1000

    def __post_init__(self):
        for name in (
            "kernel_size", "stride1", "stride2", "intermediate_dim", "embed_dim", "num_heads",
            "num_layers", "ffn_dim", "classifier_dim", "classifier_layers", "proj_dim",
            "teacher_hidden", "in_leads", "input_length",
        ):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.embed_dim % self.num_heads:
            raise ValueError("embed_dim must be divisible by num_heads")
        if not 0 <= self.classifier_dropout < 1:
            raise ValueError("classifier_dropout must lie in [0, 1)")
        if self.seq_len < 1:
            raise ValueError("input_length too short for the convolution stack")

    @property
    def seq_len(self) -> int:
        t1 = (self.input_length - self.kernel_size) // self.stride1 + 1
        return (t1 - self.kernel_size) // self.stride2 + 1

    def to_dict(self) -> dict:
        return asdict(self)


class ModelParams(dict):
    """Ordered name -> tensor mapping with a set of frozen name prefixes."""

    def __init__(self, *args, frozen: Iterable[str] = (), **kwargs):
        super().__init__(*args, **kwargs)
        self.frozen = set(frozen)

    def is_frozen(self, name: str) -> bool:
        return any(name == p or name.startswith(p + ".") for p in self.frozen)

    def freeze(self, prefix: str) -> None:
        self.frozen.add(prefix)

    def trainable_names(self) -> list:
        return [n for n in self if not n.endswith(BUFFER_SUFFIXES) and not self.is_frozen(n)]

    def copy(self) -> "ModelParams":
        return ModelParams({k: v.copy() for k, v in self.items()}, frozen=self.frozen)

    def astype(self, dtype) -> "ModelParams":
        return ModelParams({k: v.astype(dtype) for k, v in self.items()}, frozen=self.frozen)

    def subset(self, *prefixes: str) -> "ModelParams":
        keep = {k: v for k, v in self.items() if any(k.startswith(p + ".") for p in prefixes)}
        return ModelParams(keep, frozen={f for f in self.frozen if any(f.startswith(p) for p in prefixes)})

    def without(self, *prefixes: str) -> "ModelParams":
        keep = {k: v for k, v in self.items() if not any(k.startswith(p + ".") for p in prefixes)}
        return ModelParams(keep, frozen={f for f in self.frozen if not any(f.startswith(p) for p in prefixes)})


def _check(name, arr):
    if not np.all(np.isfinite(arr)):
        raise NonFiniteActivationError(name)
    return arr


# ---------------------------------------------------------------- init

def _uniform(rng, shape, fan_in, dtype):
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def _linear(p, rng, name, d_in, d_out, dtype):
    p[f"{name}.weight"] = _uniform(rng, (d_in, d_out), d_in, dtype)
    p[f"{name}.bias"] = np.zeros(d_out, dtype=dtype)


def _norm(p, name, dim, dtype, buffers=False):
    p[f"{name}.gamma"] = np.ones(dim, dtype=dtype)
    p[f"{name}.beta"] = np.zeros(dim, dtype=dtype)
    if buffers:
        p[f"{name}.running_mean"] = np.zeros(dim, dtype=dtype)
        p[f"{name}.running_var"] = np.ones(dim, dtype=dtype)


PARTS = ("encoder", "proj_ecg", "proj_cxr", "ssl_head", "classifier", "teacher", "teacher_head")


def init_params(config: EncoderConfig, seed: int, teacher_in_dim: Optional[int] = None,
                parts: Iterable[str] = ("encoder",), dtype=np.float64) -> ModelParams:
    """Fan-in uniform weights, zero biases, unit/zero norm scale/shift.

    Each part draws from its own seeded stream, so adding a part never
    changes the values of another.
    """
    parts = tuple(parts)
    unknown = set(parts) - set(PARTS)
    if unknown:
        raise ValueError(f"unknown parameter groups: {sorted(unknown)}")
    c = config
    p = ModelParams()
    for part in PARTS:
        if part not in parts:
            continue
        rng = np.random.default_rng([seed, PARTS.index(part)])
        if part == "encoder":
            k = c.kernel_size
            p["encoder.conv1.weight"] = _uniform(rng, (c.intermediate_dim, c.in_leads, k), c.in_leads * k, dtype)
            p["encoder.conv1.bias"] = np.zeros(c.intermediate_dim, dtype=dtype)
            _norm(p, "encoder.bn1", c.intermediate_dim, dtype, buffers=True)
            p["encoder.conv2.weight"] = _uniform(rng, (c.embed_dim, c.intermediate_dim, k), c.intermediate_dim * k, dtype)
            p["encoder.conv2.bias"] = np.zeros(c.embed_dim, dtype=dtype)
            _norm(p, "encoder.bn2", c.embed_dim, dtype, buffers=True)
            p["encoder.pos_embed"] = (0.02 * rng.standard_normal((c.seq_len, c.embed_dim))).astype(dtype)
            for i in range(c.num_layers):
                b = f"encoder.blocks.{i}"
                _norm(p, f"{b}.ln1", c.embed_dim, dtype)
                _linear(p, rng, f"{b}.attn.qkv", c.embed_dim, 3 * c.embed_dim, dtype)
                _linear(p, rng, f"{b}.attn.out", c.embed_dim, c.embed_dim, dtype)
                _norm(p, f"{b}.ln2", c.embed_dim, dtype)
                _linear(p, rng, f"{b}.ffn.fc1", c.embed_dim, c.ffn_dim, dtype)
                _linear(p, rng, f"{b}.ffn.fc2", c.ffn_dim, c.embed_dim, dtype)
            _norm(p, "encoder.ln_final", c.embed_dim, dtype)
        elif part in ("proj_ecg", "ssl_head"):
            _linear(p, rng, part, c.embed_dim, c.proj_dim, dtype)
        elif part == "proj_cxr":
            _linear(p, rng, part, c.embed_dim, c.proj_dim, dtype)
        elif part == "classifier":
            dims = [c.embed_dim] + [c.classifier_dim] * (c.classifier_layers - 1) + [2]
            for i in range(c.classifier_layers):
                _linear(p, rng, f"classifier.{i}", dims[i], dims[i + 1], dtype)
        elif part == "teacher":
            if teacher_in_dim is None:
                raise ValueError("teacher_in_dim is required to initialise the teacher")
            _linear(p, rng, "teacher.fc1", teacher_in_dim, c.teacher_hidden, dtype)
            _linear(p, rng, "teacher.fc2", c.teacher_hidden, c.embed_dim, dtype)
        elif part == "teacher_head":
            _linear(p, rng, "teacher_head", c.embed_dim, 2, dtype)
    return p


def parameter_count(config: EncoderConfig, teacher_in_dim: int = 0,
                    parts: Iterable[str] = ("encoder",)) -> int:
    """Trainable parameter count as a closed-form function of the config."""
    c = config
    d, f, k = c.embed_dim, c.ffn_dim, c.kernel_size
    counts = {
        "encoder": (
            c.intermediate_dim * c.in_leads * k + c.intermediate_dim + 2 * c.intermediate_dim
            + d * c.intermediate_dim * k + d + 2 * d
            + c.seq_len * d
            + c.num_layers * (2 * d + 3 * d * d + 3 * d + d * d + d + 2 * d + d * f + f + f * d + d)
            + 2 * d
        ),
        "proj_ecg": d * c.proj_dim + c.proj_dim,
        "ssl_head": d * c.proj_dim + c.proj_dim,
        "proj_cxr": d * c.proj_dim + c.proj_dim,
        "classifier": (
            d * c.classifier_dim + c.classifier_dim
            + (c.classifier_layers - 2) * (c.classifier_dim ** 2 + c.classifier_dim)
            + c.classifier_dim * 2 + 2
            if c.classifier_layers > 1 else d * 2 + 2
        ),
        "teacher": teacher_in_dim * c.teacher_hidden + c.teacher_hidden + c.teacher_hidden * d + d,
        "teacher_head": d * 2 + 2,
    }
    return sum(counts[p] for p in parts)


# ---------------------------------------------------------------- forward

def _fingerprint(params, prefix):
    return {k: v.shape for k, v in params.items() if k.startswith(prefix)}


def ecg_encoder_forward(params: ModelParams, x, config: EncoderConfig, mode: str = "eval", seed=None):
    """(B, 12, T) ECG batch -> (B, embed_dim) pooled embeddings."""
    if mode not in ("train", "eval"):
        raise ValueError("mode must be 'train' or 'eval'")
    x = np.asarray(x, dtype=params["encoder.conv1.weight"].dtype)
    if x.ndim != 3 or x.shape[1:] != (config.in_leads, config.input_length):
        raise ValueError(
            f"expected input (B, {config.in_leads}, {config.input_length}), got {x.shape}"
        )
    train = mode == "train"
    c = config
    cache = {"kind": "encoder", "config": c, "shapes": _fingerprint(params, "encoder."), "train": train}
    new_buffers = {}

    h, cache["conv1"] = L.conv1d_forward(x, params["encoder.conv1.weight"], params["encoder.conv1.bias"], c.stride1)
    h, cache["relu1"] = L.relu_forward(h)
    h, cache["bn1"], stats = L.batchnorm_forward(
        h, params["encoder.bn1.gamma"], params["encoder.bn1.beta"],
        params["encoder.bn1.running_mean"], params["encoder.bn1.running_var"], train)
    new_buffers["encoder.bn1.running_mean"], new_buffers["encoder.bn1.running_var"] = stats
    _check("conv1", h)

    h, cache["conv2"] = L.conv1d_forward(h, params["encoder.conv2.weight"], params["encoder.conv2.bias"], c.stride2)
    h, cache["relu2"] = L.relu_forward(h)
    h, cache["bn2"], stats = L.batchnorm_forward(
        h, params["encoder.bn2.gamma"], params["encoder.bn2.beta"],
        params["encoder.bn2.running_mean"], params["encoder.bn2.running_var"], train)
    new_buffers["encoder.bn2.running_mean"], new_buffers["encoder.bn2.running_var"] = stats
    _check("conv2", h)

    h = h.transpose(0, 2, 1) + params["encoder.pos_embed"]
    blocks = []
    for i in range(c.num_layers):
        b = f"encoder.blocks.{i}"
        bc = {}
        z, bc["ln1"] = L.layernorm_forward(h, params[f"{b}.ln1.gamma"], params[f"{b}.ln1.beta"])
        a, bc["attn"] = L.attention_forward(
            z, params[f"{b}.attn.qkv.weight"], params[f"{b}.attn.qkv.bias"],
            params[f"{b}.attn.out.weight"], params[f"{b}.attn.out.bias"], c.num_heads)
        h = _check(f"{b}.attn", h + a)
        z, bc["ln2"] = L.layernorm_forward(h, params[f"{b}.ln2.gamma"], params[f"{b}.ln2.beta"])
        u, bc["fc1"] = L.linear_forward(z, params[f"{b}.ffn.fc1.weight"], params[f"{b}.ffn.fc1.bias"])
        u, bc["gelu"] = L.gelu_forward(u)
        u, bc["fc2"] = L.linear_forward(u, params[f"{b}.ffn.fc2.weight"], params[f"{b}.ffn.fc2.bias"])
        h = _check(f"{b}.ffn", h + u)
        blocks.append(bc)
    cache["blocks"] = blocks
    h, cache["ln_final"] = L.layernorm_forward(h, params["encoder.ln_final.gamma"], params["encoder.ln_final.beta"])
    out = _check("pool", h.mean(axis=1))
    cache["pool_len"] = h.shape[1]
    cache["new_buffers"] = new_buffers
    return out, cache


def projection_forward(params: ModelParams, h, head: str = "proj_ecg", normalize: bool = True):
    """Linear projection followed by optional L2 row normalization.

    Rows that project to exactly zero stay zero; ``cache['degenerate']`` flags
    them so the caller can drop them from the loss.
    """
    w, b = params[f"{head}.weight"], params[f"{head}.bias"]
    h = np.asarray(h, dtype=w.dtype)
    if h.ndim != 2 or h.shape[1] != w.shape[0]:
        raise ValueError(f"{head} expects (B, {w.shape[0]}) input, got {h.shape}")
    z, lin_cache = L.linear_forward(h, w, b)
    cache = {"kind": "projection", "head": head, "shapes": _fingerprint(params, head + "."),
             "linear": lin_cache, "norm": None, "degenerate": np.zeros(len(z), dtype=bool)}
    if normalize:
        z, cache["norm"] = L.l2_normalize_forward(z)
        cache["degenerate"] = cache["norm"][2]
    return z, cache


def classifier_forward(params: ModelParams, h, config: EncoderConfig, mode: str = "eval", seed=None):
    """MLP with ReLU and dropout between layers; returns (B, 2) logits."""
    n = config.classifier_layers
    w0 = params["classifier.0.weight"]
    h = np.asarray(h, dtype=w0.dtype)
    if h.ndim != 2 or h.shape[1] != w0.shape[0]:
        raise ValueError(f"classifier expects (B, {w0.shape[0]}) input, got {h.shape}")
    train = mode == "train"
    if train and seed is None:
        raise ValueError("train mode needs a dropout seed")
    rng = np.random.default_rng(seed) if train else None
    cache = {"kind": "classifier", "config": config, "shapes": _fingerprint(params, "classifier."), "layers": []}
    for i in range(n):
        h, lin = L.linear_forward(h, params[f"classifier.{i}.weight"], params[f"classifier.{i}.bias"])
        layer = {"linear": lin}
        if i < n - 1:
            h, layer["relu"] = L.relu_forward(h)
            h, layer["drop"] = L.dropout_forward(h, config.classifier_dropout, rng)
        cache["layers"].append(layer)
    return _check("classifier", h), cache


def teacher_forward(params: ModelParams, features):
    """Two-layer MLP mapping second-modality features to embed_dim."""
    w1 = params["teacher.fc1.weight"]
    x = np.asarray(features, dtype=w1.dtype)
    if x.ndim != 2 or x.shape[1] != w1.shape[0]:
        raise ValueError(f"teacher expects (B, {w1.shape[0]}) features, got {x.shape}")
    h, c1 = L.linear_forward(x, w1, params["teacher.fc1.bias"])
    h, r1 = L.relu_forward(h)
    out, c2 = L.linear_forward(h, params["teacher.fc2.weight"], params["teacher.fc2.bias"])
    cache = {"kind": "teacher", "shapes": _fingerprint(params, "teacher."), "fc1": c1, "relu": r1, "fc2": c2}
    return _check("teacher", out), cache


def linear_head_forward(params: ModelParams, h, head: str):
    out, lin = L.linear_forward(np.asarray(h, dtype=params[f"{head}.weight"].dtype),
                                params[f"{head}.weight"], params[f"{head}.bias"])
    return out, {"kind": "linear", "head": head, "shapes": _fingerprint(params, head + "."), "linear": lin}


# ---------------------------------------------------------------- backward

def _encoder_backward(params, cache, dout, grads):
    c = cache["config"]
    T = cache["pool_len"]
    dh = np.repeat((dout / T)[:, None, :], T, axis=1)
    dh, grads["encoder.ln_final.gamma"], grads["encoder.ln_final.beta"] = L.layernorm_backward(cache["ln_final"], dh)
    for i in reversed(range(c.num_layers)):
        b = f"encoder.blocks.{i}"
        bc = cache["blocks"][i]
        du = dh
        grads[f"{b}.ffn.fc2.weight"], grads[f"{b}.ffn.fc2.bias"] = L.linear_backward(bc["fc2"], du)
        du = du @ params[f"{b}.ffn.fc2.weight"].T
        du = L.gelu_backward(bc["gelu"], du)
        grads[f"{b}.ffn.fc1.weight"], grads[f"{b}.ffn.fc1.bias"] = L.linear_backward(bc["fc1"], du)
        du = du @ params[f"{b}.ffn.fc1.weight"].T
        dz, grads[f"{b}.ln2.gamma"], grads[f"{b}.ln2.beta"] = L.layernorm_backward(bc["ln2"], du)
        dh = dh + dz
        da, dw_qkv, db_qkv, dw_out, db_out = L.attention_backward(
            bc["attn"], params[f"{b}.attn.qkv.weight"], params[f"{b}.attn.out.weight"], dh)
        grads[f"{b}.attn.qkv.weight"], grads[f"{b}.attn.qkv.bias"] = dw_qkv, db_qkv
        grads[f"{b}.attn.out.weight"], grads[f"{b}.attn.out.bias"] = dw_out, db_out
        dz, grads[f"{b}.ln1.gamma"], grads[f"{b}.ln1.beta"] = L.layernorm_backward(bc["ln1"], da)
        dh = dh + dz
    grads["encoder.pos_embed"] = dh.sum(axis=0)
    dh = dh.transpose(0, 2, 1)
    dh, grads["encoder.bn2.gamma"], grads["encoder.bn2.beta"] = L.batchnorm_backward(cache["bn2"], dh)
    dh = L.relu_backward(cache["relu2"], dh)
    dh, grads["encoder.conv2.weight"], grads["encoder.conv2.bias"] = L.conv1d_backward(
        cache["conv2"], params["encoder.conv2.weight"], dh)
    dh, grads["encoder.bn1.gamma"], grads["encoder.bn1.beta"] = L.batchnorm_backward(cache["bn1"], dh)
    dh = L.relu_backward(cache["relu1"], dh)
    dx, grads["encoder.conv1.weight"], grads["encoder.conv1.bias"] = L.conv1d_backward(
        cache["conv1"], params["encoder.conv1.weight"], dh)
    return dx


def _projection_backward(params, cache, dout, grads):
    head = cache["head"]
    dz = dout if cache["norm"] is None else L.l2_normalize_backward(cache["norm"], dout)
    grads[f"{head}.weight"], grads[f"{head}.bias"] = L.linear_backward(cache["linear"], dz)
    return dz @ params[f"{head}.weight"].T


def _classifier_backward(params, cache, dout, grads):
    dh = dout
    for i in reversed(range(len(cache["layers"]))):
        layer = cache["layers"][i]
        if "relu" in layer:
            dh = L.dropout_backward(layer["drop"], dh)
            dh = L.relu_backward(layer["relu"], dh)
        grads[f"classifier.{i}.weight"], grads[f"classifier.{i}.bias"] = L.linear_backward(layer["linear"], dh)
        dh = dh @ params[f"classifier.{i}.weight"].T
    return dh


def _teacher_backward(params, cache, dout, grads):
    grads["teacher.fc2.weight"], grads["teacher.fc2.bias"] = L.linear_backward(cache["fc2"], dout)
    dh = L.relu_backward(cache["relu"], dout @ params["teacher.fc2.weight"].T)
    grads["teacher.fc1.weight"], grads["teacher.fc1.bias"] = L.linear_backward(cache["fc1"], dh)
    return dh @ params["teacher.fc1.weight"].T


def _linear_head_backward(params, cache, dout, grads):
    head = cache["head"]
    grads[f"{head}.weight"], grads[f"{head}.bias"] = L.linear_backward(cache["linear"], dout)
    return dout @ params[f"{head}.weight"].T


_BACKWARD = {
    "encoder": _encoder_backward,
    "projection": _projection_backward,
    "classifier": _classifier_backward,
    "teacher": _teacher_backward,
    "linear": _linear_head_backward,
}


def model_backward(params: ModelParams, cache: dict, upstream, return_input_grad: bool = False):
    """Exact gradients of ``sum(upstream * output)`` for the cached forward pass."""
    kind = cache.get("kind")
    if kind not in _BACKWARD:
        raise ValueError(f"unknown cache kind {kind!r}")
    shapes = cache["shapes"]
    prefix = next(iter(shapes)).split(".")[0] + "." if shapes else ""
    extra = sorted(set(_fingerprint(params, prefix)) - set(shapes)) if prefix else []
    if extra:
        raise ValueError(f"cache does not match parameters: {extra[0]!r} was not in the forward pass")
    for name, shape in shapes.items():
        if name not in params or params[name].shape != shape:
            raise ValueError(f"cache does not match parameters at {name!r}")
        if params.is_frozen(name) and not name.endswith(BUFFER_SUFFIXES):
            raise FrozenParameterError(f"gradient requested for frozen parameter {name!r}")
    grads = {}
    dx = _BACKWARD[kind](params, cache, np.asarray(upstream), grads)
    grads = {k: grads[k] for k in params if k in grads}
    return (grads, dx) if return_input_grad else grads
