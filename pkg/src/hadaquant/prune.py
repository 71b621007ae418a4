"""Magnitude pruning: unstructured with percentile thresholds, and
whole-channel structured pruning.

The threshold is the requested-fraction quantile of absolute values
(linear interpolation).  Elements strictly below the threshold are zeroed;
ties at the threshold are kept, which makes the kept set exactly
``{x : |x| >= T}`` and deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Seed, Tensor, sample_elements

# Full-tensor threshold estimation up to this many elements, sampled above.
_SAMPLE_CAP = 1 << 20


@dataclass(frozen=True)
class PruneMask:
    """Kept/pruned bookkeeping for one tensor."""

    bits: np.ndarray  # bool, True = kept
    fraction: float
    threshold: float

    @property
    def kept_count(self) -> int:
        return int(self.bits.sum())


def magnitude_threshold(
    x: Tensor, fraction: float, sample: int | None = None, seed: Seed = Seed(0)
) -> float:
    """Percentile threshold T such that ~``fraction`` of |x| lies below it.

    ``sample`` caps how many elements feed the quantile estimate; None
    means the full tensor up to 2^20 elements.  fraction = 0 prunes
    nothing and fraction = 1 prunes everything.
    """
    if not 0.0 <= fraction <= 1.0:
        raise ValueError(f"fraction must be in [0, 1], got {fraction}")
    mags = np.abs(x.array.reshape(-1).astype(np.float64))
    if fraction == 0.0:
        return 0.0
    if fraction == 1.0:
        return float(np.nextafter(mags.max(), np.inf))
    cap = sample if sample is not None else _SAMPLE_CAP
    if mags.size > cap:
        mags = np.abs(sample_elements(x, cap, seed))
    return float(np.quantile(mags, fraction))


def prune_unstructured(
    x: Tensor, fraction: float, seed: Seed = Seed(0)
) -> tuple[Tensor, PruneMask]:
    """Zero elements with |x| < T; the mask records kept positions."""
    t = magnitude_threshold(x, fraction, seed=seed)
    kept = np.abs(x.array.astype(np.float64)) >= t
    pruned = np.where(kept, x.array, np.float32(0.0))
    return Tensor(pruned), PruneMask(kept.reshape(-1), fraction, t)


def prune_structured(w: Tensor, fraction: float) -> tuple[Tensor, list[int]]:
    """Zero whole output channels (rows) with the lowest mean |magnitude|.

    Returns the pruned tensor and the kept row indices in ascending order.
    """
    if w.array.ndim != 2:
        raise ValueError(f"structured pruning needs a 2-D tensor, got {w.shape}")
    if not 0.0 <= fraction <= 1.0:
        raise ValueError(f"fraction must be in [0, 1], got {fraction}")
    rows = w.shape[0]
    n_prune = int(np.floor(fraction * rows))
    means = np.abs(w.array.astype(np.float64)).mean(axis=1)
    order = np.argsort(means, kind="stable")
    pruned_rows = order[:n_prune]
    out = w.array.copy()
    out[pruned_rows, :] = 0.0
    kept = sorted(int(i) for i in order[n_prune:])
    return Tensor(out), kept


def save_mask(mask: PruneMask, path) -> None:
    """Raw bitstream export: u64 element count, then LSB-first kept bits."""
    import struct

    bits = np.packbits(mask.bits.astype(np.uint8), bitorder="little")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", mask.bits.size))
        fh.write(bits.tobytes())
