"""Central finite-difference verification of the hand-written backward passes."""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import tltr
from .decoding import nll_and_grad

Params = dict[str, np.ndarray]
Objective = Callable[[Params], tuple[float, Params]]

# gradient entries smaller than this are compared in absolute terms
ABS_FLOOR = 1e-6


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = ABS_FLOOR) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def numeric_grad(fn: Objective, params: Params, name: str, eps: float) -> np.ndarray:
    base = params[name]
    g = np.zeros_like(base, dtype=np.float64)
    for idx in np.ndindex(base.shape):
        orig = base[idx]
        base[idx] = orig + eps
        f_plus = fn(params)[0]
        base[idx] = orig - eps
        f_minus = fn(params)[0]
        base[idx] = orig
        g[idx] = (f_plus - f_minus) / (2 * eps)
    return g


def grad_check(fn: Objective, params: Params, eps: float = 1e-6) -> float:
    """Largest relative error between ``fn``'s analytic gradients and central differences.

    ``fn(params)`` must return ``(scalar value, {name: gradient})``. Arrays in
    ``params`` are perturbed in place and restored.
    """
    if not 1e-6 <= eps <= 1e-3:
        raise ValueError("eps must lie in [1e-6, 1e-3]")
    params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    value, analytic = fn(params)
    if not np.isfinite(value):
        raise ValueError("objective is not finite at the check point")
    worst = 0.0
    for name in params:
        num = numeric_grad(fn, params, name, eps)
        ana = np.asarray(analytic[name], dtype=np.float64)
        if not (np.all(np.isfinite(num)) and np.all(np.isfinite(ana))):
            raise ValueError(f"non-finite gradient for {name}")
        if ana.shape != num.shape:
            raise ValueError(f"gradient for {name} has shape {ana.shape}, expected {num.shape}")
        if num.size:
            worst = max(worst, float(relative_error(ana, num).max()))
    return worst


# ---------------------------------------------------------------------------
# scalar objectives: each op output is contracted with a fixed random tensor


def project_objective(n: int = 3, d_in: int = 5, d_out: int = 4, seed: int = 0) -> tuple[Objective, Params]:
    rng = np.random.default_rng(seed)
    probe = rng.standard_normal((n, d_out))

    def fn(p: Params):
        y = tltr.project(p["tokens"], p["w"], p["b"])
        dx, dw, db = tltr.project_backward(probe, p["tokens"], p["w"])
        return float((y * probe).sum()), {"tokens": dx, "w": dw, "b": db}

    params = {"tokens": rng.standard_normal((n, d_in)), "w": rng.standard_normal((d_in, d_out)), "b": rng.standard_normal(d_out)}
    return fn, params


def attention_objective(
    n: int = 3, d: int = 4, n_heads: int = 2, batch: tuple[int, ...] = (2,), seed: int = 0
) -> tuple[Objective, Params]:
    rng = np.random.default_rng(seed)
    probe = rng.standard_normal((*batch, n, d))

    def fn(p: Params):
        block = {k: p[k] for k in tltr.BLOCK_KEYS}
        y, cache = tltr.attention_block_forward(p["x"], block, n_heads)
        dx, grads = tltr.attention_block_backward(probe, block, cache)
        return float((y * probe).sum()), {"x": dx, **grads}

    params = {"x": rng.standard_normal((*batch, n, d)), **tltr.init_block(d, rng, ffn_mult=2, scale=0.5)}
    return fn, params


def tltr_objective(seed: int = 0) -> tuple[Objective, Params]:
    cfg = tltr.TltrConfig(n_layers_in=3, d_model=4, pooling_factor=2, pooled_len_cap=3, d_llm=6, n_heads=2, ffn_mult=2)
    rng = np.random.default_rng(seed)
    n_frames = 7  # leaves a partial tail window and a pooled frame beyond the cap
    probe = rng.standard_normal((min(n_frames // cfg.pooling_factor, cfg.pooled_len_cap), cfg.d_model))
    keys = list(tltr.init_tltr_params(cfg, seed).keys())

    def fn(p: Params):
        stack = tltr.ActivationStack(p["stack"])
        model = {k: p[k] for k in keys}
        y = tltr.tltr_forward(stack, cfg, model)
        dstack, grads = tltr.tltr_backward(probe, stack, cfg, model)
        return float((y * probe).sum()), {"stack": dstack, **grads}

    params = {"stack": rng.standard_normal((cfg.n_layers_in, n_frames, cfg.d_model))}
    for k, v in tltr.init_tltr_params(cfg, seed).items():
        params[k] = v * 0.5
    return fn, params


def lora_objective(d: int = 5, r: int = 2, alpha: float = 4.0, seed: int = 0) -> tuple[Objective, Params]:
    rng = np.random.default_rng(seed)
    probe = rng.standard_normal((3, d))

    def fn(p: Params):
        y = tltr.lora_apply(p["w"], p["a"], p["b"], alpha, r, p["x"])
        g = tltr.lora_backward(probe, p["w"], p["a"], p["b"], alpha, r, p["x"])
        return float((y * probe).sum()), g

    params = {
        "w": rng.standard_normal((d, d)),
        "a": rng.standard_normal((r, d)),
        "b": rng.standard_normal((d, r)),
        "x": rng.standard_normal((3, d)),
    }
    return fn, params


def nll_objective(t_len: int = 4, vocab: int = 7, seed: int = 0) -> tuple[Objective, Params]:
    rng = np.random.default_rng(seed)
    targets = rng.integers(0, vocab, size=t_len)

    def fn(p: Params):
        loss, g = nll_and_grad(p["logits"], targets)
        return loss, {"logits": g}

    return fn, {"logits": rng.standard_normal((t_len, vocab))}


OBJECTIVES: dict[str, Callable[..., tuple[Objective, Params]]] = {
    "project": project_objective,
    "attention_block": attention_objective,
    "tltr_forward": tltr_objective,
    "lora_apply": lora_objective,
    "next_token_nll": nll_objective,
}


def check_all(eps: float = 1e-6, seed: int = 0) -> dict[str, float]:
    return {name: grad_check(*build(seed=seed), eps=eps) for name, build in OBJECTIVES.items()}
