"""Reference numerics for the audio perception stack.

Time pooling, time- and layer-wise attention, projection to LLM width,
LoRA adapters, input assembly, and trainable-parameter accounting. Every
differentiable op has a hand-written backward pass so it can be checked
against finite differences (see :mod:`asqa.gradcheck`). Kernels run in
float64.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, BinaryIO, Sequence

import numpy as np

Params = dict[str, np.ndarray]

BLOCK_KEYS = ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo", "w1", "b1", "w2", "b2")
STACK_MAGIC = b"ASTK"


@dataclass(frozen=True)
class TltrConfig:
    n_layers_in: int = 32
    d_model: int = 1280
    pooling_factor: int = 40
    pooled_len_cap: int = 25
    d_llm: int = 4096
    n_heads: int = 4
    depth: int = 1
    ffn_mult: int = 4

    def __post_init__(self) -> None:
        if self.pooling_factor < 1:
            raise ValueError("pooling_factor must be >= 1")
        if self.d_llm <= 0 or self.d_model <= 0:
            raise ValueError("widths must be positive")
        if self.depth < 1 or self.n_heads < 1:
            raise ValueError("depth and n_heads must be >= 1")
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")


@dataclass(frozen=True)
class LoraConfig:
    rank: int = 8
    alpha: float = 16.0
    targets: tuple[str, ...] = ("query", "key")
    n_attention_layers: int = 32
    d_attn: int = 4096

    def __post_init__(self) -> None:
        # rank 0 means "no adapters" for accounting purposes
        if self.rank < 0:
            raise ValueError("rank must be >= 0")
        if self.alpha <= 0:
            raise ValueError("alpha must be > 0")


@dataclass
class ActivationStack:
    data: np.ndarray

    def __post_init__(self) -> None:
        if self.data.ndim != 3:
            raise ValueError(f"expected [layers, frames, d_model], got shape {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("activation stack contains non-finite values")

    @property
    def n_layers(self) -> int:
        return self.data.shape[0]

    @property
    def n_frames(self) -> int:
        return self.data.shape[1]

    @property
    def d_model(self) -> int:
        return self.data.shape[2]


def synthetic_stack(n_layers: int, n_frames: int, d_model: int, seed: int = 0) -> ActivationStack:
    rng = np.random.default_rng(seed)
    return ActivationStack(rng.standard_normal((n_layers, n_frames, d_model), dtype=np.float32))


def write_stack(stack: ActivationStack, fh: BinaryIO) -> None:
    fh.write(STACK_MAGIC)
    fh.write(struct.pack("<3I", *stack.data.shape))
    fh.write(np.ascontiguousarray(stack.data, dtype="<f4").tobytes())


def read_stack(fh: BinaryIO) -> ActivationStack:
    if fh.read(4) != STACK_MAGIC:
        raise ValueError("not an activation stack file")
    dims = struct.unpack("<3I", fh.read(12))
    count = dims[0] * dims[1] * dims[2]
    buf = fh.read(4 * count)
    if len(buf) != 4 * count:
        raise ValueError("truncated activation stack file")
    return ActivationStack(np.frombuffer(buf, dtype="<f4").reshape(dims).astype(np.float32))


def save_stack(stack: ActivationStack, path: str | Path) -> None:
    with open(path, "wb") as fh:
        write_stack(stack, fh)


def load_stack(path: str | Path) -> ActivationStack:
    with open(path, "rb") as fh:
        return read_stack(fh)


# ---------------------------------------------------------------------------
# time pooling


def pool_time(data: np.ndarray, factor: int) -> np.ndarray:
    """Mean over consecutive windows of ``factor`` frames; a partial tail window is dropped."""
    if factor < 1:
        raise ValueError("pooling factor must be >= 1")
    n_layers, n_frames, d = data.shape
    t = n_frames // factor
    out = np.empty((n_layers, t, d), dtype=np.float64)
    for i in range(n_layers):  # layer at a time keeps peak memory bounded
        out[i] = data[i, : t * factor].reshape(t, factor, d).mean(axis=1, dtype=np.float64)
    return out


def pool_time_backward(dout: np.ndarray, n_frames: int, factor: int) -> np.ndarray:
    n_layers, t, d = dout.shape
    dx = np.zeros((n_layers, n_frames, d))
    dx[:, : t * factor] = np.repeat(dout / factor, factor, axis=1)
    return dx


# ---------------------------------------------------------------------------
# transformer block

_GELU_C = math.sqrt(2.0 / math.pi)


def _gelu(u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    inner = _GELU_C * (u + 0.044715 * u**3)
    t = np.tanh(inner)
    y = 0.5 * u * (1.0 + t)
    dy = 0.5 * (1.0 + t) + 0.5 * u * (1.0 - t**2) * _GELU_C * (1.0 + 3 * 0.044715 * u**2)
    return y, dy


def softmax(s: np.ndarray, axis: int = -1) -> np.ndarray:
    z = s - s.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def init_block(d: int, rng: np.random.Generator, ffn_mult: int = 4, scale: float | None = None) -> Params:
    h = ffn_mult * d
    s_d = scale if scale is not None else 1.0 / math.sqrt(d)
    s_h = scale if scale is not None else 1.0 / math.sqrt(h)
    return {
        "wq": rng.normal(0, s_d, (d, d)), "bq": rng.normal(0, 0.02, d),
        "wk": rng.normal(0, s_d, (d, d)), "bk": rng.normal(0, 0.02, d),
        "wv": rng.normal(0, s_d, (d, d)), "bv": rng.normal(0, 0.02, d),
        "wo": rng.normal(0, s_d, (d, d)), "bo": rng.normal(0, 0.02, d),
        "w1": rng.normal(0, s_d, (d, h)), "b1": rng.normal(0, 0.02, h),
        "w2": rng.normal(0, s_h, (h, d)), "b2": rng.normal(0, 0.02, d),
    }  # fmt: skip


def block_param_count(d: int, ffn_mult: int = 4) -> int:
    h = ffn_mult * d
    return 4 * (d * d + d) + (d * h + h) + (h * d + d)


def _split_heads(x: np.ndarray, n_heads: int) -> np.ndarray:
    b, n, d = x.shape
    return x.reshape(b, n, n_heads, d // n_heads).transpose(0, 2, 1, 3)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    b, h, n, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, n, h * dh)


def _check_block(x: np.ndarray, params: Params, n_heads: int) -> None:
    d = x.shape[-1]
    if params["wq"].shape != (d, d):
        raise ValueError(f"block width {params['wq'].shape[0]} does not match input width {d}")
    if d % n_heads:
        raise ValueError(f"width {d} not divisible by {n_heads} heads")


def attention_block_forward(x: np.ndarray, params: Params, n_heads: int = 1) -> tuple[np.ndarray, dict[str, Any]]:
    """Self-attention plus feed-forward, both residual, over the second-to-last axis.

    Leading axes of ``x`` are treated as independent batch items. Returns
    the output and a cache for :func:`attention_block_backward`; the cache's
    ``"attn"`` entry holds the [batch, heads, n, n] attention weights.
    """
    _check_block(x, params, n_heads)
    lead = x.shape[:-2]
    n, d = x.shape[-2:]
    xb = np.asarray(x, dtype=np.float64).reshape(-1, n, d)
    p = params
    dh = d // n_heads

    q = _split_heads(xb @ p["wq"] + p["bq"], n_heads)
    k = _split_heads(xb @ p["wk"] + p["bk"], n_heads)
    v = _split_heads(xb @ p["wv"] + p["bv"], n_heads)
    attn = softmax(q @ k.transpose(0, 1, 3, 2) / math.sqrt(dh))
    ctx = _merge_heads(attn @ v)
    h = xb + ctx @ p["wo"] + p["bo"]
    u = h @ p["w1"] + p["b1"]
    g, dg_du = _gelu(u)
    out = h + g @ p["w2"] + p["b2"]
    cache = dict(x=xb, q=q, k=k, v=v, attn=attn, ctx=ctx, h=h, g=g, dg_du=dg_du, lead=lead, n_heads=n_heads)
    return out.reshape(*lead, n, d), cache


def attention_block(x: np.ndarray, params: Params, n_heads: int = 1) -> np.ndarray:
    return attention_block_forward(x, params, n_heads)[0]


def attention_block_backward(dout: np.ndarray, params: Params, cache: dict[str, Any]) -> tuple[np.ndarray, Params]:
    p = params
    xb, q, k, v, attn = cache["x"], cache["q"], cache["k"], cache["v"], cache["attn"]
    ctx, h, g, dg_du = cache["ctx"], cache["h"], cache["g"], cache["dg_du"]
    n_heads = cache["n_heads"]
    n, d = xb.shape[1:]
    dh_ = d // n_heads
    dout = dout.reshape(-1, n, d)
    grads: Params = {}

    def _sum2(a: np.ndarray, b: np.ndarray) -> np.ndarray:
        # sum over batch of a^T b
        return np.einsum("bni,bnj->ij", a, b)

    # feed-forward branch
    grads["w2"] = _sum2(g, dout)
    grads["b2"] = dout.sum(axis=(0, 1))
    du = (dout @ p["w2"].T) * dg_du
    grads["w1"] = _sum2(h, du)
    grads["b1"] = du.sum(axis=(0, 1))
    dh = dout + du @ p["w1"].T

    # attention branch
    grads["wo"] = _sum2(ctx, dh)
    grads["bo"] = dh.sum(axis=(0, 1))
    dctx = _split_heads(dh @ p["wo"].T, n_heads)
    dattn = dctx @ v.transpose(0, 1, 3, 2)
    dv = attn.transpose(0, 1, 3, 2) @ dctx
    ds = attn * (dattn - (dattn * attn).sum(axis=-1, keepdims=True)) / math.sqrt(dh_)
    dq = ds @ k
    dk = ds.transpose(0, 1, 3, 2) @ q
    dq, dk, dv = _merge_heads(dq), _merge_heads(dk), _merge_heads(dv)
    dx = dh.copy()
    for name, dproj in (("q", dq), ("k", dk), ("v", dv)):
        grads[f"w{name}"] = _sum2(xb, dproj)
        grads[f"b{name}"] = dproj.sum(axis=(0, 1))
        dx += dproj @ p[f"w{name}"].T
    return dx.reshape(*cache["lead"], n, d), grads


# ---------------------------------------------------------------------------
# TLTR


def init_tltr_params(config: TltrConfig, seed: int = 0) -> Params:
    rng = np.random.default_rng(seed)
    params: Params = {}
    for axis in ("time", "layer"):
        for i in range(config.depth):
            for key, arr in init_block(config.d_model, rng, config.ffn_mult).items():
                params[f"{axis}{i}.{key}"] = arr
    return params


def _block(params: Params, axis: str, i: int) -> Params:
    prefix = f"{axis}{i}."
    return {k[len(prefix) :]: v for k, v in params.items() if k.startswith(prefix)}


def tltr_param_count(config: TltrConfig) -> int:
    return 2 * config.depth * block_param_count(config.d_model, config.ffn_mult)


def _tltr_forward(stack: ActivationStack, config: TltrConfig, params: Params):
    if stack.n_layers != config.n_layers_in or stack.d_model != config.d_model:
        raise ValueError(
            f"stack shape {stack.data.shape} does not match config "
            f"({config.n_layers_in} layers, d_model {config.d_model})"
        )
    pooled = pool_time(stack.data, config.pooling_factor)
    t = min(pooled.shape[1], config.pooled_len_cap)
    if t == 0:
        return np.zeros((0, config.d_model)), ([], pooled.shape, 0)
    x = pooled[:, :t]
    caches = []
    # attention along time, independently for every encoder layer
    for i in range(config.depth):
        x, c = attention_block_forward(x, _block(params, "time", i), config.n_heads)
        caches.append(("time", i, c))
    # attention across encoder layers, independently for every time step
    x = x.transpose(1, 0, 2)
    for i in range(config.depth):
        x, c = attention_block_forward(x, _block(params, "layer", i), config.n_heads)
        caches.append(("layer", i, c))
    return x.mean(axis=1), (caches, pooled.shape, t)


def tltr_forward(stack: ActivationStack, config: TltrConfig, params: Params) -> np.ndarray:
    """[layers, frames, d_model] activations -> [min(frames // factor, cap), d_model]."""
    return _tltr_forward(stack, config, params)[0]


def tltr_backward(
    dout: np.ndarray, stack: ActivationStack, config: TltrConfig, params: Params
) -> tuple[np.ndarray, Params]:
    """Gradients of sum(out * dout) w.r.t. the activation stack and all TLTR parameters."""
    _, (caches, pooled_shape, t) = _tltr_forward(stack, config, params)
    if t == 0:
        return np.zeros(stack.data.shape), {k: np.zeros_like(v) for k, v in params.items()}
    n_layers = pooled_shape[0]
    dx = np.repeat(dout[:, None, :] / n_layers, n_layers, axis=1)
    grads: Params = {}
    for axis, i, cache in reversed(caches):
        dx, g = attention_block_backward(dx, _block(params, axis, i), cache)
        grads.update({f"{axis}{i}.{k}": v for k, v in g.items()})
        if axis == "layer" and i == 0:
            dx = dx.transpose(1, 0, 2)
    dpooled = np.zeros(pooled_shape)
    dpooled[:, :t] = dx
    return pool_time_backward(dpooled, stack.n_frames, config.pooling_factor), grads


# ---------------------------------------------------------------------------
# projection and LoRA


def project(tokens: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Affine map of each token row: tokens @ w + b."""
    if tokens.ndim != 2 or w.ndim != 2 or tokens.shape[1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ValueError(f"shape mismatch: tokens {tokens.shape}, w {w.shape}, b {b.shape}")
    return tokens @ w + b


def project_backward(dout: np.ndarray, tokens: np.ndarray, w: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    return dout @ w.T, tokens.T @ dout, dout.sum(axis=0)


def _check_lora(w: np.ndarray, a: np.ndarray, b: np.ndarray, r: int, x: np.ndarray) -> None:
    d = w.shape[0]
    if r < 1:
        raise ValueError("LoRA rank must be >= 1")
    if w.shape != (d, d) or a.shape != (r, d) or b.shape != (d, r) or x.shape[-1] != d:
        raise ValueError(f"shape mismatch: W {w.shape}, A {a.shape}, B {b.shape}, x {x.shape}, r={r}")


def lora_apply(w: np.ndarray, a: np.ndarray, b: np.ndarray, alpha: float, r: int, x: np.ndarray) -> np.ndarray:
    """y = W x + (alpha / r) B (A x); ``x`` may carry leading batch axes."""
    _check_lora(w, a, b, r, x)
    return x @ w.T + (alpha / r) * ((x @ a.T) @ b.T)


def lora_backward(
    dy: np.ndarray, w: np.ndarray, a: np.ndarray, b: np.ndarray, alpha: float, r: int, x: np.ndarray
) -> dict[str, np.ndarray]:
    """Gradients of sum(y * dy) w.r.t. x, A and B (W is frozen but reported too)."""
    s = alpha / r
    x2 = x.reshape(-1, x.shape[-1])
    dy2 = dy.reshape(-1, dy.shape[-1])
    ax = x2 @ a.T
    dax = s * (dy2 @ b)
    return {
        "x": (dy2 @ w + dax @ a).reshape(x.shape),
        "a": dax.T @ x2,
        "b": s * dy2.T @ ax,
        "w": dy2.T @ x2,
    }


def lora_delta(a: np.ndarray, b: np.ndarray, alpha: float, r: int) -> np.ndarray:
    return (alpha / r) * (b @ a)


# ---------------------------------------------------------------------------
# input assembly


class TokenKind(str, Enum):
    AUDIO = "A"
    SPOKEN_TEXT = "S"
    QUESTION = "Q"
    OUTPUT = "O"


@dataclass(frozen=True)
class TokenSequence:
    kind: TokenKind
    tokens: Any  # [n, d] array for audio, token ids otherwise

    def __len__(self) -> int:
        return len(self.tokens)


@dataclass(frozen=True)
class AssembledInput:
    audio: np.ndarray
    spoken: tuple[int, ...]
    question: tuple[int, ...]
    separator: tuple[int, ...] = field(default=())

    @property
    def segments(self) -> list[TokenSequence]:
        return [
            TokenSequence(TokenKind.AUDIO, self.audio),
            TokenSequence(TokenKind.SPOKEN_TEXT, self.spoken),
            TokenSequence(TokenKind.QUESTION, self.question),
        ]

    def __len__(self) -> int:
        return len(self.audio) + len(self.spoken) + len(self.question) + 2 * len(self.separator)


MAX_AUDIO_TOKENS = 25


def assemble_input(
    a: TokenSequence,
    s: TokenSequence,
    q: TokenSequence,
    max_audio_tokens: int = MAX_AUDIO_TOKENS,
    separator: Sequence[int] = (),
) -> AssembledInput:
    """Concatenate audio, spoken-text and question tokens, trimming audio to the cap.

    ``separator`` token ids, if given, go between A|S and S|Q.
    """
    if (a.kind, s.kind, q.kind) != (TokenKind.AUDIO, TokenKind.SPOKEN_TEXT, TokenKind.QUESTION):
        raise ValueError(f"expected kinds A, S, Q; got {a.kind.value}, {s.kind.value}, {q.kind.value}")
    audio = np.asarray(a.tokens)[:max_audio_tokens]
    return AssembledInput(audio, tuple(s.tokens), tuple(q.tokens), tuple(separator))


# ---------------------------------------------------------------------------
# parameter accounting


@dataclass(frozen=True)
class ParamBreakdown:
    tltr: int
    lora: int
    projection: int

    @property
    def total(self) -> int:
        return self.tltr + self.lora + self.projection

    def as_dict(self) -> dict[str, int]:
        return {"tltr": self.tltr, "lora": self.lora, "projection": self.projection, "total": self.total}


def lora_param_count(cfg: LoraConfig) -> int:
    return cfg.n_attention_layers * len(cfg.targets) * (cfg.d_attn * cfg.rank + cfg.rank * cfg.d_attn)


def projection_param_count(d_in: int, d_out: int) -> int:
    return d_in * d_out + d_out


def count_trainable_params(
    tltr_cfg: TltrConfig, lora_cfg: LoraConfig, proj_dims: tuple[int, int] | None = None
) -> ParamBreakdown:
    d_in, d_out = proj_dims or (tltr_cfg.d_model, tltr_cfg.d_llm)
    return ParamBreakdown(
        tltr=tltr_param_count(tltr_cfg),
        lora=lora_param_count(lora_cfg),
        projection=projection_param_count(d_in, d_out),
    )


def millions(n: int, digits: int = 1) -> float:
    return round(n / 1e6, digits)
