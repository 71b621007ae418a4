"""Desk-scale surrogate of one Swin Transformer Layer.

Single-head window attention plus a two-layer GELU MLP, with residuals.
Quantization sits exactly where the compression pipeline puts it: the six
linear weights, their input activations, and both operand pairs of the
attention batch matmuls (Q.K^T and attn.V).  Softmax, the 1/sqrt(d)
scaling, and the residual adds stay in full precision, and every quantizer
can be wrapped in a Hadamard transform / inverse pair.

The default embedding width is 15, deliberately not a power of two, so the
padding path is exercised end to end.  Weights draw from a Student-t with
3 degrees of freedom scaled by 1/sqrt(dim): heavy-tailed like the
outlier-bearing tensors the pipeline targets.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .finetune import CalibSet, FinetuneConfig, QuantizedLinear, finetune_params
from .hadamard import hadamard_inverse, hadamard_transform, next_pow2, _transform_array
from .metrics import Image, psnr
from .prune import prune_unstructured
from .quant import (
    PackedTensor,
    QuantParams,
    _dequantize_array,
    _quantize_array,
    aggregate_bits_per_parameter,
    pack,
    search_bounds,
    unpack,
)
from .tensor import Seed, Tensor

WEIGHT_SITES = ("w_q", "w_k", "w_v", "w_proj", "w_mlp1", "w_mlp2")
ACT_SITES = ("attn_in", "proj_in", "mlp1_in", "mlp2_in")
BMM_SITES = ("qk_q", "qk_k", "av_p", "av_v")

HADAMARD_MODES = ("off", "w", "wa")
TUNE_MODES = ("none", "ab", "bounds", "all")


@dataclass
class SiteQuantizer:
    """Quantizer attached to one site; params=None means pass-through."""

    params: QuantParams | None = None
    hadamard: bool = False
    mask: np.ndarray | None = None  # kept elements of the transformed domain


@dataclass
class QuantPlan:
    bits: int
    prune_fraction: float
    hadamard_mode: str
    weight_sites: dict[str, SiteQuantizer]
    act_sites: dict[str, SiteQuantizer]
    effective_weights: dict[str, np.ndarray]
    packed: dict[str, PackedTensor]


@dataclass
class ToyLayer:
    dim: int
    tokens: int
    weights: dict[str, Tensor]
    plan: QuantPlan | None = None


def make_toy_layer(seed: Seed = Seed(0), dim: int = 15, tokens: int = 32, mlp_ratio: int = 2) -> ToyLayer:
    """Seeded layer with Student-t(3) weights scaled by 1/sqrt(dim)."""
    rng = np.random.default_rng(seed.value)
    hidden = mlp_ratio * dim
    shapes = {
        "w_q": (dim, dim),
        "w_k": (dim, dim),
        "w_v": (dim, dim),
        "w_proj": (dim, dim),
        "w_mlp1": (hidden, dim),
        "w_mlp2": (dim, hidden),
    }
    weights = {
        name: Tensor(rng.standard_t(3, size=shape) / math.sqrt(dim))
        for name, shape in shapes.items()
    }
    return ToyLayer(dim=dim, tokens=tokens, weights=weights)


def make_toy_input(seed: Seed, tokens: int = 32, dim: int = 15) -> Tensor:
    """Heavy-tailed Student-t(3) input of shape [tokens, dim].

    The 0.2 scale keeps entries at activation-like magnitudes while the
    t(3) tails still produce the outliers the transform is meant to tame.
    """
    rng = np.random.default_rng(seed.value ^ 0xA5A5A5A5)
    return Tensor(rng.standard_t(3, size=(tokens, dim)) * 0.2)


def _softmax_rows(s: np.ndarray) -> np.ndarray:
    z = np.exp(s - s.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def _gelu(x: np.ndarray) -> np.ndarray:
    # tanh approximation; exact erf is unnecessary for the surrogate
    return 0.5 * x * (1.0 + np.tanh(math.sqrt(2.0 / math.pi) * (x + 0.044715 * x**3)))


def _apply_site(arr: np.ndarray, sq: SiteQuantizer | None) -> np.ndarray:
    """Hadamard-wrapped fake quantization of one activation tensor."""
    if sq is None or (sq.params is None and not sq.hadamard):
        return arr
    if not sq.hadamard:
        return _dequantize_array(_quantize_array(arr, sq.params), sq.params)
    orig = arr.shape[-1]
    padded = next_pow2(orig)
    if padded != orig:
        widths = [(0, 0)] * (arr.ndim - 1) + [(0, padded - orig)]
        arr = np.pad(arr, widths)
    xt = _transform_array(arr)
    if sq.params is not None:
        xt = _dequantize_array(_quantize_array(xt, sq.params), sq.params)
    return _transform_array(xt)[..., :orig]


def _forward(
    weights: dict[str, np.ndarray],
    dim: int,
    x: np.ndarray,
    sites: dict[str, SiteQuantizer] | None = None,
    taps: dict[str, np.ndarray] | None = None,
) -> np.ndarray:
    def q(name: str, arr: np.ndarray) -> np.ndarray:
        if taps is not None:
            taps[name] = arr
        if sites is None:
            return arr
        return _apply_site(arr, sites.get(name))

    xq = q("attn_in", x)
    qm = xq @ weights["w_q"].T
    km = xq @ weights["w_k"].T
    vm = xq @ weights["w_v"].T
    scores = q("qk_q", qm) @ q("qk_k", km).T / math.sqrt(dim)
    attn = _softmax_rows(scores)
    ctx = q("av_p", attn) @ q("av_v", vm)
    h = x + q("proj_in", ctx) @ weights["w_proj"].T
    m1 = _gelu(q("mlp1_in", h) @ weights["w_mlp1"].T)
    out = h + q("mlp2_in", m1) @ weights["w_mlp2"].T
    return out


def _check_input(layer: ToyLayer, x: Tensor) -> np.ndarray:
    arr = x.array.astype(np.float64)
    if arr.ndim != 2 or arr.shape[1] != layer.dim:
        raise ValueError(f"input must be [tokens, {layer.dim}], got {x.shape}")
    return arr


def forward_fp(layer: ToyLayer, x: Tensor) -> Tensor:
    """Full-precision reference forward pass."""
    weights = {k: w.array.astype(np.float64) for k, w in layer.weights.items()}
    return Tensor(_forward(weights, layer.dim, _check_input(layer, x)))


def forward_quantized(layer: ToyLayer, x: Tensor) -> Tensor:
    """Forward pass through the quantization plan; requires a built plan."""
    if layer.plan is None:
        raise RuntimeError("quantization plan not populated; call build_plan first")
    return Tensor(
        _forward(
            layer.plan.effective_weights,
            layer.dim,
            _check_input(layer, x),
            sites=layer.plan.act_sites,
        )
    )


def _fp_taps(layer: ToyLayer, x: Tensor) -> dict[str, np.ndarray]:
    weights = {k: w.array.astype(np.float64) for k, w in layer.weights.items()}
    taps: dict[str, np.ndarray] = {}
    _forward(weights, layer.dim, _check_input(layer, x), taps=taps)
    return taps


def _prepare_weight(
    w: Tensor, bits: int, hadamard: bool, prune_fraction: float, search_steps: int, seed: Seed
) -> tuple[SiteQuantizer, PackedTensor, np.ndarray]:
    """Transform, prune, bound-search, and pack one weight tensor."""
    if hadamard:
        wt, pad = hadamard_transform(w)
    else:
        wt, pad = w, None
    mask_bits = None
    if prune_fraction > 0.0:
        _, mask = prune_unstructured(wt, prune_fraction, seed)
        mask_bits = mask.bits
        kept_vals = wt.array.reshape(-1)[mask_bits]
    else:
        kept_vals = wt.array.reshape(-1)
    params = search_bounds(Tensor(kept_vals), bits, search_steps)
    codes = _quantize_array(kept_vals.astype(np.float64), params)
    pt = pack(codes, params, w.shape, pad=pad, mask=mask_bits, hadamard_applied=hadamard)
    stored = unpack(pt)
    eff = hadamard_inverse(stored, pad) if hadamard else stored
    sq = SiteQuantizer(params=params, hadamard=hadamard, mask=mask_bits)
    return sq, pt, eff.array.astype(np.float64)


def _repack_weight(layer: ToyLayer, name: str, plan: QuantPlan) -> None:
    """Regenerate codes and the effective weight after a parameter update."""
    sq = plan.weight_sites[name]
    w = layer.weights[name]
    if sq.hadamard:
        wt, pad = hadamard_transform(w)
    else:
        wt, pad = w, None
    vals = wt.array.reshape(-1)
    if sq.mask is not None:
        vals = vals[sq.mask]
    codes = _quantize_array(vals.astype(np.float64), sq.params)
    pt = pack(codes, sq.params, w.shape, pad=pad, mask=sq.mask, hadamard_applied=sq.hadamard)
    stored = unpack(pt)
    plan.packed[name] = pt
    plan.effective_weights[name] = (
        hadamard_inverse(stored, pad) if sq.hadamard else stored
    ).array.astype(np.float64)


def build_plan(
    layer: ToyLayer,
    x_calib: Tensor,
    bits: int,
    hadamard_mode: str = "wa",
    prune_fraction: float = 0.0,
    search_steps: int = 64,
    seed: Seed = Seed(0),
) -> QuantPlan:
    """Search bounds for every quantized site and prepare stored weights.

    Weight quantizers (optionally Hadamard on "w"/"wa") are packed once;
    activation and batch-matmul quantizers (Hadamard only on "wa") are
    calibrated on the full-precision intermediates of ``x_calib``.
    """
    if hadamard_mode not in HADAMARD_MODES:
        raise ValueError(f"hadamard_mode must be one of {HADAMARD_MODES}")
    had_w = hadamard_mode in ("w", "wa")
    had_a = hadamard_mode == "wa"

    weight_sites: dict[str, SiteQuantizer] = {}
    packed: dict[str, PackedTensor] = {}
    effective: dict[str, np.ndarray] = {}
    for name in WEIGHT_SITES:
        sq, pt, eff = _prepare_weight(
            layer.weights[name], bits, had_w, prune_fraction, search_steps, seed
        )
        weight_sites[name] = sq
        packed[name] = pt
        effective[name] = eff

    taps = _fp_taps(layer, x_calib)
    act_sites: dict[str, SiteQuantizer] = {}
    for name in ACT_SITES + BMM_SITES:
        vals = taps[name]
        if had_a:
            search_on, _ = hadamard_transform(Tensor(vals))
        else:
            search_on = Tensor(vals)
        act_sites[name] = SiteQuantizer(
            params=search_bounds(search_on, bits, search_steps), hadamard=had_a
        )

    plan = QuantPlan(
        bits=bits,
        prune_fraction=prune_fraction,
        hadamard_mode=hadamard_mode,
        weight_sites=weight_sites,
        act_sites=act_sites,
        effective_weights=effective,
        packed=packed,
    )
    layer.plan = plan
    return plan


def make_passthrough_plan(layer: ToyLayer, hadamard: bool = False) -> QuantPlan:
    """Plan whose sites quantize nothing; with ``hadamard`` the transform
    wrap still runs, which makes the forward a pure involution check."""
    weight_sites = {n: SiteQuantizer(hadamard=hadamard) for n in WEIGHT_SITES}
    act_sites = {n: SiteQuantizer(hadamard=hadamard) for n in ACT_SITES + BMM_SITES}
    effective = {}
    for name in WEIGHT_SITES:
        w = layer.weights[name]
        if hadamard:
            wt, pad = hadamard_transform(w)
            effective[name] = hadamard_inverse(wt, pad).array.astype(np.float64)
        else:
            effective[name] = w.array.astype(np.float64)
    plan = QuantPlan(
        bits=8,
        prune_fraction=0.0,
        hadamard_mode="wa" if hadamard else "off",
        weight_sites=weight_sites,
        act_sites=act_sites,
        effective_weights=effective,
        packed={},
    )
    layer.plan = plan
    return plan


# Calibration sites in forward order: (activation site, weight-like site,
# transpose).  Batch-matmul pairings take both operands from activations.
_CALIBRATION_ORDER = (
    ("attn_in", "w_q", True),
    ("attn_in", "w_k", True),
    ("attn_in", "w_v", True),
    ("qk_q", "qk_k", True),
    ("av_p", "av_v", False),
    ("proj_in", "w_proj", True),
    ("mlp1_in", "w_mlp1", True),
    ("mlp2_in", "w_mlp2", True),
)


def _fp_reference(layer: ToyLayer, fp_taps: dict[str, np.ndarray], act_name: str, w_name: str, transpose: bool) -> np.ndarray:
    if w_name in WEIGHT_SITES:
        w = layer.weights[w_name].array.astype(np.float64)
        return fp_taps[act_name] @ w.T
    right = fp_taps[w_name]
    return fp_taps[act_name] @ (right.T if transpose else right)


def finetune_plan(
    layer: ToyLayer, x_calib: Tensor, cfg: FinetuneConfig
) -> dict[str, list[float]]:
    """Calibrate every quantized site against the full-precision trajectory.

    Sites are tuned in forward order, block-wise: each matmul problem takes
    its inputs from the current quantized forward pass (so later sites see
    the errors earlier ones actually produce) and its reference from the FP
    forward.  Weight codes and effective weights are regenerated as tuning
    progresses.  Returns the per-site loss histories.
    """
    plan = layer.plan
    if plan is None:
        raise RuntimeError("quantization plan not populated; call build_plan first")
    x = _check_input(layer, x_calib)
    fp_taps = _fp_taps(layer, x_calib)
    histories: dict[str, list[float]] = {}
    for act_name, w_name, transpose in _CALIBRATION_ORDER:
        q_taps: dict[str, np.ndarray] = {}
        _forward(plan.effective_weights, layer.dim, x, sites=plan.act_sites, taps=q_taps)
        act_sq = plan.act_sites[act_name]
        is_weight = w_name in WEIGHT_SITES
        w_sq = plan.weight_sites[w_name] if is_weight else plan.act_sites[w_name]
        right = layer.weights[w_name] if is_weight else Tensor(q_taps[w_name])
        ref = _fp_reference(layer, fp_taps, act_name, w_name, transpose)
        problem = QuantizedLinear(
            weight=right,
            weight_params=w_sq.params,
            act_params=act_sq.params,
            hadamard_weight=w_sq.hadamard,
            hadamard_act=act_sq.hadamard,
            weight_mask=w_sq.mask,
            transpose=transpose,
        )
        calib = CalibSet((Tensor(q_taps[act_name]),), (Tensor(ref),))
        tuned, history = finetune_params(problem, calib, cfg)
        w_sq.params = tuned["weight"]
        act_sq.params = tuned.get("activation", act_sq.params)
        if is_weight:
            _repack_weight(layer, w_name, plan)
        histories[f"{act_name}|{w_name}"] = history
    return histories


@dataclass(frozen=True)
class PipelineReport:
    bits: int
    prune_fraction: float
    hadamard_mode: str
    tune: str
    mse: float
    psnr_db: float
    bits_per_param: float


def _outputs_psnr(ref: np.ndarray, test: np.ndarray) -> float:
    lo = ref.min()
    hi = ref.max()
    if hi == lo:
        return math.inf if np.array_equal(ref, test) else 0.0
    a = (ref - lo) / (hi - lo)
    b = np.clip((test - lo) / (hi - lo), 0.0, 1.0)
    return psnr(Image(a), Image(b))


def evaluate_pipeline(
    layer: ToyLayer,
    x: Tensor,
    bits: int,
    prune_fraction: float,
    hadamard_mode: str = "wa",
    tune: str = "none",
    search_steps: int = 64,
    seed: Seed = Seed(0),
    finetune_cfg: FinetuneConfig | None = None,
) -> PipelineReport:
    """Hadamard -> prune (weights) -> quantize -> forward, with metrics.

    ``tune`` selects which parameters the calibration pass learns: "none",
    "ab" (alpha/beta only), "bounds", or "all".
    """
    if tune not in TUNE_MODES:
        raise ValueError(f"tune must be one of {TUNE_MODES}")
    build_plan(
        layer,
        x,
        bits,
        hadamard_mode=hadamard_mode,
        prune_fraction=prune_fraction,
        search_steps=search_steps,
        seed=seed,
    )
    if tune != "none":
        cfg = finetune_cfg or FinetuneConfig(max_iters=200, seed=seed)
        cfg = replace(
            cfg,
            tune_bounds=tune in ("bounds", "all"),
            tune_alpha_beta=tune in ("ab", "all"),
        )
        finetune_plan(layer, x, cfg)
    y_fp = forward_fp(layer, x).array.astype(np.float64)
    y_q = forward_quantized(layer, x).array.astype(np.float64)
    mse = float(np.mean((y_q - y_fp) ** 2))
    return PipelineReport(
        bits=bits,
        prune_fraction=prune_fraction,
        hadamard_mode=hadamard_mode,
        tune=tune,
        mse=mse,
        psnr_db=_outputs_psnr(y_fp, y_q),
        bits_per_param=aggregate_bits_per_parameter(layer.plan.packed.values()),
    )
