"""Query-transformer modality adapter with a hand-written backward pass.

Pipeline for one utterance::

    states [L, T, d_enc]
      -> softmax(layer_logits)-weighted sum over L        [T, d_enc]
      -> input map                                         [T, d_model]  (memory)
    queries [Q, d_model]
      -> n_blocks x (pre-LN self-attn, pre-LN cross-attn on memory, pre-LN FFN), residual each
      -> output projection                                 [Q, d_llm]

No positional encoding is added anywhere, so the output does not depend on
frame order. Everything is float64 numpy.
"""
from __future__ import annotations

import hashlib
import io
import json
import zipfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

LN_EPS = 1e-5
_GELU_C = np.sqrt(2.0 / np.pi)


class ShapeError(ValueError):
    pass


class StaleCacheError(RuntimeError):
    pass


@dataclass(frozen=True)
class AdapterConfig:
    d_enc: int = 768
    d_model: int = 768
    d_llm: int = 4096
    n_queries: int = 64
    n_blocks: int = 2
    n_heads: int = 12
    n_enc_layers: int = 13
    ffn_mult: int = 4
    use_input_map: bool = True
    use_output_proj: bool = True

    def __post_init__(self):
        for name in ("d_enc", "d_model", "d_llm", "n_queries", "n_heads", "n_enc_layers", "ffn_mult"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.n_blocks < 0:
            raise ValueError("n_blocks must be >= 0")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if not self.use_input_map and self.d_enc != self.d_model:
            raise ValueError("without an input map d_enc must equal d_model")
        if not self.use_output_proj and self.d_llm != self.d_model:
            raise ValueError("without an output projection d_llm must equal d_model")

    @property
    def d_ffn(self) -> int:
        return self.ffn_mult * self.d_model


def _block_shapes(cfg: AdapterConfig, b: int) -> list[tuple[str, tuple[int, ...]]]:
    d, f = cfg.d_model, cfg.d_ffn
    out = []
    for ln in ("ln1", "ln2", "ln3"):
        out += [(f"blocks.{b}.{ln}.g", (d,)), (f"blocks.{b}.{ln}.b", (d,))]
    for att in ("sa", "ca"):
        for m in ("q", "k", "v", "o"):
            out += [(f"blocks.{b}.{att}.w{m}", (d, d)), (f"blocks.{b}.{att}.b{m}", (d,))]
    out += [
        (f"blocks.{b}.ffn.w1", (d, f)),
        (f"blocks.{b}.ffn.b1", (f,)),
        (f"blocks.{b}.ffn.w2", (f, d)),
        (f"blocks.{b}.ffn.b2", (d,)),
    ]
    return out


def param_shapes(cfg: AdapterConfig) -> dict[str, tuple[int, ...]]:
    """Name -> shape for every trainable tensor, in canonical order."""
    shapes: list[tuple[str, tuple[int, ...]]] = [
        ("layer_logits", (cfg.n_enc_layers,)),
        ("queries", (cfg.n_queries, cfg.d_model)),
    ]
    if cfg.use_input_map:
        shapes += [("in.w", (cfg.d_enc, cfg.d_model)), ("in.b", (cfg.d_model,))]
    for b in range(cfg.n_blocks):
        shapes += _block_shapes(cfg, b)
    if cfg.use_output_proj:
        shapes += [("out.w", (cfg.d_model, cfg.d_llm)), ("out.b", (cfg.d_llm,))]
    return dict(shapes)


def count_trainable_params(cfg: AdapterConfig) -> int:
    """Closed-form parameter count.

    per block = 3 layer norms (2d each) + 2 attentions (4 maps of d*d + d)
                + FFN (d*f + f + f*d + d)
    total = L + Q*d + [d_enc*d + d] + n_blocks*block + [d*d_llm + d_llm]
    """
    d, f = cfg.d_model, cfg.d_ffn
    block = 3 * 2 * d + 2 * 4 * (d * d + d) + (d * f + f + f * d + d)
    total = cfg.n_enc_layers + cfg.n_queries * d + cfg.n_blocks * block
    if cfg.use_input_map:
        total += cfg.d_enc * d + d
    if cfg.use_output_proj:
        total += d * cfg.d_llm + cfg.d_llm
    return total


class AdapterParams:
    """Named float64 tensors plus a version counter bumped on every update."""

    def __init__(self, config: AdapterConfig, tensors: dict[str, np.ndarray]):
        shapes = param_shapes(config)
        if set(shapes) != set(tensors):
            missing = sorted(set(shapes) - set(tensors))
            extra = sorted(set(tensors) - set(shapes))
            raise ShapeError(f"parameter names mismatch; missing={missing} extra={extra}")
        self.config = config
        self.tensors: dict[str, np.ndarray] = {}
        for name, shape in shapes.items():
            arr = np.asarray(tensors[name], dtype=np.float64)
            if arr.shape != shape:
                raise ShapeError(f"{name}: expected shape {shape}, got {arr.shape}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} has non-finite entries")
            self.tensors[name] = arr.copy()
        self.version = 0

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def items(self):
        return self.tensors.items()

    def copy(self) -> "AdapterParams":
        return AdapterParams(self.config, self.tensors)

    def update(self, new: dict[str, np.ndarray]) -> None:
        for name, arr in new.items():
            if arr.shape != self.tensors[name].shape:
                raise ShapeError(f"{name}: update shape {arr.shape} != {self.tensors[name].shape}")
            self.tensors[name] = np.asarray(arr, dtype=np.float64)
        self.version += 1

    def digest(self) -> str:
        h = hashlib.sha256()
        for name, arr in self.tensors.items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        return h.hexdigest()

    def size(self) -> int:
        return sum(a.size for a in self.tensors.values())


def init_params(cfg: AdapterConfig, seed: int = 0) -> AdapterParams:
    """Fan-in uniform weights, zero biases, unit LN gains, zero layer logits,
    N(0, 0.02^2) queries; the input map starts as identity when square."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if name == "layer_logits":
            arr = np.zeros(shape)
        elif name == "queries":
            arr = rng.normal(0.0, 0.02, size=shape)
        elif name == "in.w" and cfg.d_enc == cfg.d_model:
            arr = np.eye(cfg.d_model)
        elif leaf == "g":
            arr = np.ones(shape)
        elif len(shape) == 1:
            arr = np.zeros(shape)
        else:
            bound = 1.0 / np.sqrt(shape[0])
            arr = rng.uniform(-bound, bound, size=shape)
        tensors[name] = arr
    return AdapterParams(cfg, tensors)


# ---------------------------------------------------------------------------
# primitive ops: each forward returns (out, cache); each backward takes the cache


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def _softmax_backward(p: np.ndarray, dp: np.ndarray) -> np.ndarray:
    return p * (dp - np.sum(dp * p, axis=-1, keepdims=True))


def layer_weighted_sum(states: np.ndarray, layer_logits: np.ndarray) -> np.ndarray:
    """``sum_l softmax(layer_logits)[l] * states[l]`` -> [T, d_enc]."""
    states = np.asarray(states, dtype=np.float64)
    if np.isnan(states).any() or np.isnan(layer_logits).any():
        raise ValueError("NaN in encoder states or layer logits")
    if states.ndim != 3 or states.shape[0] != layer_logits.shape[0]:
        raise ShapeError(
            f"states shape {states.shape} does not match n_enc_layers={layer_logits.shape[0]}"
        )
    w = softmax(layer_logits)
    return np.tensordot(w, states, axes=(0, 0))


def _layernorm(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * inv
    return xhat * g + b, (xhat, inv, g)


def _layernorm_backward(dy, cache):
    xhat, inv, g = cache
    n = xhat.shape[-1]
    dg = np.sum(dy * xhat, axis=0)
    db = np.sum(dy, axis=0)
    dxhat = dy * g
    dx = (inv / n) * (
        n * dxhat
        - np.sum(dxhat, axis=-1, keepdims=True)
        - xhat * np.sum(dxhat * xhat, axis=-1, keepdims=True)
    )
    return dx, dg, db


def _gelu(x):
    u = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(u)
    return 0.5 * x * (1.0 + t), (x, t)


def _gelu_backward(dy, cache):
    x, t = cache
    du = _GELU_C * (1.0 + 3 * 0.044715 * x**2)
    return dy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)


def _split_heads(x, h):
    n, d = x.shape
    return x.reshape(n, h, d // h).transpose(1, 0, 2)


def _merge_heads(x):
    h, n, dh = x.shape
    return x.transpose(1, 0, 2).reshape(n, h * dh)


def _attention(xq, xkv, p, prefix, n_heads):
    q = xq @ p[f"{prefix}.wq"] + p[f"{prefix}.bq"]
    k = xkv @ p[f"{prefix}.wk"] + p[f"{prefix}.bk"]
    v = xkv @ p[f"{prefix}.wv"] + p[f"{prefix}.bv"]
    qh, kh, vh = (_split_heads(a, n_heads) for a in (q, k, v))
    scale = 1.0 / np.sqrt(qh.shape[-1])
    probs = softmax(qh @ kh.transpose(0, 2, 1) * scale)
    ctx = _merge_heads(probs @ vh)
    out = ctx @ p[f"{prefix}.wo"] + p[f"{prefix}.bo"]
    return out, (xq, xkv, qh, kh, vh, probs, ctx, scale)


def _attention_backward(dout, cache, p, prefix, grads):
    xq, xkv, qh, kh, vh, probs, ctx, scale = cache
    n_heads = qh.shape[0]
    grads[f"{prefix}.wo"] += ctx.T @ dout
    grads[f"{prefix}.bo"] += dout.sum(axis=0)
    dctx = _split_heads(dout @ p[f"{prefix}.wo"].T, n_heads)
    dprobs = dctx @ vh.transpose(0, 2, 1)
    dvh = probs.transpose(0, 2, 1) @ dctx
    dscores = _softmax_backward(probs, dprobs) * scale
    dqh = dscores @ kh
    dkh = dscores.transpose(0, 2, 1) @ qh
    dq, dk, dv = (_merge_heads(a) for a in (dqh, dkh, dvh))
    grads[f"{prefix}.wq"] += xq.T @ dq
    grads[f"{prefix}.bq"] += dq.sum(axis=0)
    grads[f"{prefix}.wk"] += xkv.T @ dk
    grads[f"{prefix}.bk"] += dk.sum(axis=0)
    grads[f"{prefix}.wv"] += xkv.T @ dv
    grads[f"{prefix}.bv"] += dv.sum(axis=0)
    dxq = dq @ p[f"{prefix}.wq"].T
    dxkv = dk @ p[f"{prefix}.wk"].T + dv @ p[f"{prefix}.wv"].T
    return dxq, dxkv


# ---------------------------------------------------------------------------
# full adapter


@dataclass
class AdapterCache:
    params_id: int
    params_version: int
    states: np.ndarray
    weights: np.ndarray
    pooled: np.ndarray
    memory: np.ndarray
    blocks: list = field(default_factory=list)
    final: np.ndarray | None = None


def _check_states(states: np.ndarray, cfg: AdapterConfig) -> np.ndarray:
    states = np.asarray(states, dtype=np.float64)
    if states.ndim != 3:
        raise ShapeError(f"states must be [n_enc_layers, T, d_enc], got ndim={states.ndim}")
    L, T, d = states.shape
    if L != cfg.n_enc_layers:
        raise ShapeError(f"states n_enc_layers={L} != config n_enc_layers={cfg.n_enc_layers}")
    if d != cfg.d_enc:
        raise ShapeError(f"states d_enc={d} != config d_enc={cfg.d_enc}")
    if T < 1:
        raise ShapeError("states need at least one frame (T >= 1)")
    if not np.all(np.isfinite(states)):
        raise ValueError("encoder states contain non-finite values")
    return states


def adapter_forward(
    states: np.ndarray, params: AdapterParams, config: AdapterConfig | None = None
) -> tuple[np.ndarray, AdapterCache]:
    """Map encoder hidden states to ``[n_queries, d_llm]`` speech features."""
    cfg = config or params.config
    if cfg != params.config:
        raise ShapeError("config does not match the parameters' config")
    states = _check_states(states, cfg)
    p = params.tensors

    weights = softmax(p["layer_logits"])
    pooled = layer_weighted_sum(states, p["layer_logits"])
    memory = pooled @ p["in.w"] + p["in.b"] if cfg.use_input_map else pooled
    cache = AdapterCache(id(params), params.version, states, weights, pooled, memory)

    h = p["queries"]
    for b in range(cfg.n_blocks):
        pre = f"blocks.{b}"
        a1, ln1 = _layernorm(h, p[f"{pre}.ln1.g"], p[f"{pre}.ln1.b"])
        sa, sa_c = _attention(a1, a1, p, f"{pre}.sa", cfg.n_heads)
        h = h + sa
        a2, ln2 = _layernorm(h, p[f"{pre}.ln2.g"], p[f"{pre}.ln2.b"])
        ca, ca_c = _attention(a2, memory, p, f"{pre}.ca", cfg.n_heads)
        h = h + ca
        a3, ln3 = _layernorm(h, p[f"{pre}.ln3.g"], p[f"{pre}.ln3.b"])
        z1 = a3 @ p[f"{pre}.ffn.w1"] + p[f"{pre}.ffn.b1"]
        g1, gc = _gelu(z1)
        h = h + g1 @ p[f"{pre}.ffn.w2"] + p[f"{pre}.ffn.b2"]
        cache.blocks.append((ln1, sa_c, ln2, ca_c, ln3, a3, g1, gc))
    cache.final = h
    out = h @ p["out.w"] + p["out.b"] if cfg.use_output_proj else h.copy()
    return out, cache


def adapter_backward(
    grad_out: np.ndarray, cache: AdapterCache, params: AdapterParams
) -> dict[str, np.ndarray]:
    """Gradients of ``sum(grad_out * output)`` with respect to every parameter."""
    if cache.params_id != id(params) or cache.params_version != params.version:
        raise StaleCacheError("cache was produced by different or since-updated parameters")
    cfg = params.config
    p = params.tensors
    grad_out = np.asarray(grad_out, dtype=np.float64)
    if grad_out.shape != (cfg.n_queries, cfg.d_llm):
        raise ShapeError(f"grad_out shape {grad_out.shape} != {(cfg.n_queries, cfg.d_llm)}")
    grads = {name: np.zeros_like(arr) for name, arr in p.items()}

    if cfg.use_output_proj:
        grads["out.w"] += cache.final.T @ grad_out
        grads["out.b"] += grad_out.sum(axis=0)
        dh = grad_out @ p["out.w"].T
    else:
        dh = grad_out.copy()

    dmemory = np.zeros_like(cache.memory)
    for b in reversed(range(cfg.n_blocks)):
        pre = f"blocks.{b}"
        ln1, sa_c, ln2, ca_c, ln3, a3, g1, gc = cache.blocks[b]
        # feed-forward
        grads[f"{pre}.ffn.w2"] += g1.T @ dh
        grads[f"{pre}.ffn.b2"] += dh.sum(axis=0)
        dz1 = _gelu_backward(dh @ p[f"{pre}.ffn.w2"].T, gc)
        grads[f"{pre}.ffn.w1"] += a3.T @ dz1
        grads[f"{pre}.ffn.b1"] += dz1.sum(axis=0)
        da3 = dz1 @ p[f"{pre}.ffn.w1"].T
        dx, dg, dbeta = _layernorm_backward(da3, ln3)
        grads[f"{pre}.ln3.g"] += dg
        grads[f"{pre}.ln3.b"] += dbeta
        dh = dh + dx
        # cross-attention
        da2, dmem = _attention_backward(dh, ca_c, p, f"{pre}.ca", grads)
        dmemory += dmem
        dx, dg, dbeta = _layernorm_backward(da2, ln2)
        grads[f"{pre}.ln2.g"] += dg
        grads[f"{pre}.ln2.b"] += dbeta
        dh = dh + dx
        # self-attention: q, k and v all come from the same normed input
        dq_in, dkv_in = _attention_backward(dh, sa_c, p, f"{pre}.sa", grads)
        dx, dg, dbeta = _layernorm_backward(dq_in + dkv_in, ln1)
        grads[f"{pre}.ln1.g"] += dg
        grads[f"{pre}.ln1.b"] += dbeta
        dh = dh + dx
    grads["queries"] += dh

    if cfg.use_input_map:
        grads["in.w"] += cache.pooled.T @ dmemory
        grads["in.b"] += dmemory.sum(axis=0)
        dpooled = dmemory @ p["in.w"].T
    else:
        dpooled = dmemory
    dweights = np.tensordot(cache.states, dpooled, axes=([1, 2], [0, 1]))
    w = cache.weights
    grads["layer_logits"] += w * (dweights - np.dot(w, dweights))
    return grads


# ---------------------------------------------------------------------------
# stand-in encoder and checkpoints


def mock_encoder(
    record_id: str,
    config: AdapterConfig,
    seed: int,
    duration_s: float = 1.0,
    frame_rate: float = 50.0,
) -> np.ndarray:
    """Deterministic pseudo-random hidden states keyed by ``(record_id, seed)``.

    ``T = max(1, round(duration_s * frame_rate))``.
    """
    digest = hashlib.sha256(f"{seed}\x00{record_id}".encode("utf-8")).digest()
    rng = np.random.Generator(np.random.PCG64(int.from_bytes(digest[:16], "little")))
    T = max(1, int(round(duration_s * frame_rate)))
    return rng.standard_normal((config.n_enc_layers, T, config.d_enc))


CHECKPOINT_HEADER = "header.json"


def save_checkpoint(path: str | Path, params: AdapterParams, extra: dict | None = None) -> str:
    """Zip archive: ``header.json`` (config, tensor table, extra) and one raw
    little-endian float64 row-major blob per tensor. Returns the sha256 of
    the archive; timestamps are fixed so identical params give identical bytes."""
    header = {
        "config": asdict(params.config),
        "tensors": [{"name": n, "shape": list(a.shape), "dtype": "<f8"} for n, a in params.items()],
        "extra": extra or {},
    }
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        def put(name, data):
            info = zipfile.ZipInfo(name, date_time=(1980, 1, 1, 0, 0, 0))
            info.compress_type = zipfile.ZIP_DEFLATED
            zf.writestr(info, data)

        put(CHECKPOINT_HEADER, json.dumps(header, indent=2, sort_keys=True))
        for name, arr in params.items():
            put(f"tensors/{name}", np.ascontiguousarray(arr, dtype="<f8").tobytes())
    data = buf.getvalue()
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def load_checkpoint(path: str | Path) -> tuple[AdapterParams, dict]:
    with zipfile.ZipFile(path) as zf:
        header = json.loads(zf.read(CHECKPOINT_HEADER))
        cfg = AdapterConfig(**header["config"])
        tensors = {}
        for entry in header["tensors"]:
            raw = zf.read(f"tensors/{entry['name']}")
            tensors[entry["name"]] = np.frombuffer(raw, dtype="<f8").reshape(entry["shape"]).copy()
    return AdapterParams(cfg, tensors), header.get("extra", {})
