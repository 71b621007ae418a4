"""Gradient calibration of quantizer parameters against full-precision outputs.

Rounding is handled with a straight-through estimator (identity gradient);
clipping and code clamping act as gates that zero the gradient outside the
active range, with boundary gradients routed to the bounds.  The optimizer
is a from-scratch Adam with elementwise gradient clipping to [-1, 1] and a
hard iteration cap; a non-finite gradient triggers a safe exit.  The
returned parameters are the best seen by calibration loss, so they are
never worse than the initialization.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .hadamard import next_pow2, _transform_array
from .quant import QuantParams, round_half_away
from .tensor import Seed, Tensor

_ADAM_EPS = 1e-8
_MIN_BOUND_GAP = 1e-6
_MIN_EFF_SCALE = 1e-8


@dataclass(frozen=True)
class FinetuneConfig:
    learning_rate: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    grad_clip: float = 1.0
    max_iters: int = 4000
    tune_bounds: bool = True
    tune_alpha_beta: bool = True
    seed: Seed = field(default_factory=Seed)

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("Adam betas must lie in (0, 1)")
        if self.max_iters < 1:
            raise ValueError(f"max_iters must be >= 1, got {self.max_iters}")


@dataclass(frozen=True)
class CalibSet:
    """Calibration inputs paired with full-precision reference outputs."""

    inputs: tuple[Tensor, ...]
    reference_outputs: tuple[Tensor, ...]

    def __post_init__(self):
        if len(self.inputs) < 1:
            raise ValueError("calibration set must not be empty")
        if len(self.inputs) != len(self.reference_outputs):
            raise ValueError("inputs and reference_outputs must pair up")


@dataclass(frozen=True)
class Gradients:
    l: float
    u: float
    alpha: float
    beta: float


def _fq_parts(x: np.ndarray, p: QuantParams):
    """Elementwise fake-quantize values and straight-through partials.

    Returns (true dequant value, identity-round surrogate value, and the
    surrogate partial derivatives w.r.t. l, u, alpha, beta).
    """
    m = float(p.nlevels)
    span = p.u - p.l
    slope = m / span + p.alpha  # quantize slope
    sp = p.eff_scale
    lz = p.eff_zero

    lo = x < p.l
    hi = x > p.u
    vc = np.clip(x, p.l, p.u)
    qt = slope * (vc - lz)
    gate = (qt >= 0.0) & (qt <= m)
    vq_true = np.clip(round_half_away(qt), 0.0, m)
    vq_ste = np.clip(qt, 0.0, m)

    dslope_dl = m / span**2
    dvc_dl = lo.astype(np.float64)
    dvc_du = hi.astype(np.float64)
    dqt_dl = dslope_dl * (vc - lz) + slope * (dvc_dl - 1.0)
    dqt_du = -dslope_dl * (vc - lz) + slope * dvc_du
    dqt_da = vc - lz
    dqt_db = np.full_like(x, -slope)

    g = gate.astype(np.float64)
    d_l = (-1.0 / m) * vq_ste + sp * g * dqt_dl + 1.0
    d_u = (1.0 / m) * vq_ste + sp * g * dqt_du
    d_a = vq_ste + sp * g * dqt_da
    d_b = sp * g * dqt_db + 1.0

    v_true = sp * vq_true + lz
    v_ste = sp * vq_ste + lz
    return v_true, v_ste, (d_l, d_u, d_a, d_b)


def ste_gradients(x: Tensor, p: QuantParams) -> Gradients:
    """Gradients of mean((fake_quantize(x) - x)^2) w.r.t. (l, u, alpha, beta).

    Both the residual and the partials come from the identity-round
    surrogate, so central finite differences of that surrogate loss
    reproduce these values away from clip/clamp kinks.
    """
    arr = x.array.astype(np.float64)
    _, v_ste, parts = _fq_parts(arr, p)
    e = 2.0 * (v_ste - arr) / arr.size
    return Gradients(*(float(np.sum(e * d)) for d in parts))


def _pad_last(arr: np.ndarray, padded: int) -> np.ndarray:
    if arr.shape[-1] == padded:
        return arr
    widths = [(0, 0)] * (arr.ndim - 1) + [(0, padded - arr.shape[-1])]
    return np.pad(arr, widths)


def _site_values_and_parts(arr: np.ndarray, p: QuantParams, hadamard: bool, mask=None):
    """Fake-quantize ``arr`` (optionally inside a Hadamard wrap) with partials.

    ``mask`` is a kept-element mask over the (padded) quantization domain;
    masked-out elements are pinned to 0 with zero gradient, matching how
    pruned weights are stored.
    """
    arr = arr.astype(np.float64)
    if hadamard:
        orig = arr.shape[-1]
        padded = next_pow2(orig)
        xt = _transform_array(_pad_last(arr, padded))
    else:
        xt = arr
    v_true, _, parts = _fq_parts(xt, p)
    if mask is not None:
        keep = mask.reshape(xt.shape)
        v_true = np.where(keep, v_true, 0.0)
        parts = tuple(np.where(keep, d, 0.0) for d in parts)
    if hadamard:
        v_true = _transform_array(v_true)[..., :orig]
        parts = tuple(_transform_array(d)[..., :orig] for d in parts)
    return v_true, parts


@dataclass(frozen=True)
class QuantizedLinear:
    """One quantized matmul site: y = act_q(X) @ weight_q(W)^T (or @ W).

    ``weight`` holds the right operand in its original domain; ``transpose``
    distinguishes linear layers (X @ W^T) from batch-matmul pairings like
    attention @ values (X @ W).  ``weight_mask`` marks kept elements of the
    (padded) quantization domain after pruning.
    """

    weight: Tensor
    weight_params: QuantParams
    act_params: QuantParams | None = None
    hadamard_weight: bool = False
    hadamard_act: bool = False
    weight_mask: np.ndarray | None = None
    transpose: bool = True


_PARAM_NAMES = ("l", "u", "alpha", "beta")


def _as_dict(p: QuantParams) -> dict[str, float]:
    return {"l": p.l, "u": p.u, "alpha": p.alpha, "beta": p.beta}


def _project(p: QuantParams, vals: dict[str, float]) -> QuantParams:
    """Re-impose u > l and eff_scale > 0 after a gradient step."""
    l = vals["l"]
    u = max(vals["u"], l + _MIN_BOUND_GAP)
    scale = (u - l) / p.nlevels
    alpha = max(vals["alpha"], _MIN_EFF_SCALE - scale)
    return replace(p, l=l, u=u, alpha=alpha, beta=vals["beta"])


def finetune_params(
    layer: QuantizedLinear, calib: CalibSet, cfg: FinetuneConfig
) -> tuple[dict[str, QuantParams], list[float]]:
    """Adam-calibrate quantizer params to match full-precision outputs.

    Minimizes the MSE between the quantized matmul outputs and
    ``calib.reference_outputs`` over the tuned subset of (l, u, alpha,
    beta); gradients are elementwise clipped to [-grad_clip, grad_clip].
    Returns the best-so-far parameters per site and the loss history.
    """
    x = np.concatenate([t.array.astype(np.float64).reshape(-1, t.shape[-1]) for t in calib.inputs])
    y = np.concatenate(
        [t.array.astype(np.float64).reshape(-1, t.shape[-1]) for t in calib.reference_outputs]
    )
    w = layer.weight.array.astype(np.float64)

    sites: dict[str, QuantParams] = {"weight": layer.weight_params}
    if layer.act_params is not None:
        sites["activation"] = layer.act_params

    tuned: list[tuple[str, str]] = []
    for site in sites:
        if cfg.tune_bounds:
            tuned += [(site, "l"), (site, "u")]
        if cfg.tune_alpha_beta:
            tuned += [(site, "alpha"), (site, "beta")]

    m_state = {k: 0.0 for k in tuned}
    v_state = {k: 0.0 for k in tuned}
    best_loss = math.inf
    best = dict(sites)
    history: list[float] = []

    for it in range(1, cfg.max_iters + 1):
        w_hat, w_parts = _site_values_and_parts(
            w, sites["weight"], layer.hadamard_weight, layer.weight_mask
        )
        if "activation" in sites:
            x_hat, x_parts = _site_values_and_parts(x, sites["activation"], layer.hadamard_act)
        else:
            x_hat, x_parts = x, None

        pred = x_hat @ (w_hat.T if layer.transpose else w_hat)
        err = pred - y
        loss = float(np.mean(err**2))
        if not math.isfinite(loss):
            break
        history.append(loss)
        if loss < best_loss:
            best_loss = loss
            best = dict(sites)

        coeff = 2.0 / err.size
        if layer.transpose:
            g_w = coeff * (err.T @ x_hat)  # dL/dW_hat, shape of w_hat
        else:
            g_w = coeff * (x_hat.T @ err)
        g_x = coeff * (err @ (w_hat if layer.transpose else w_hat.T))

        grads: dict[tuple[str, str], float] = {}
        for site, name in tuned:
            upstream = g_w if site == "weight" else g_x
            parts = w_parts if site == "weight" else x_parts
            grads[(site, name)] = float(np.sum(upstream * parts[_PARAM_NAMES.index(name)]))
        if not all(math.isfinite(g) for g in grads.values()):
            break  # nan/inf gradient: safe exit with best-so-far

        new_vals = {site: _as_dict(p) for site, p in sites.items()}
        for key in tuned:
            g = min(max(grads[key], -cfg.grad_clip), cfg.grad_clip)
            m_state[key] = cfg.beta1 * m_state[key] + (1 - cfg.beta1) * g
            v_state[key] = cfg.beta2 * v_state[key] + (1 - cfg.beta2) * g * g
            m_hat = m_state[key] / (1 - cfg.beta1**it)
            v_hat = v_state[key] / (1 - cfg.beta2**it)
            site, name = key
            new_vals[site][name] -= cfg.learning_rate * m_hat / (math.sqrt(v_hat) + _ADAM_EPS)
        sites = {site: _project(sites[site], vals) for site, vals in new_vals.items()}

    return best, history
