"""Quantizers and calibrators.

Uniform affine/symmetric quantization with round-half-to-even everywhere,
the four CNN-style range calibrators (minmax, EMA, percentile, OMSE), and the
transformer-specific quantizers: 4-bit log2 for post-softmax attention maps
and power-of-two-factor per-channel scaling for LayerNorm inputs.

Conventions (documented, tested):
  affine      -> unsigned levels [0, 2^bits - 1], zero_point in range
  symmetric   -> signed levels [-(2^(bits-1)-1), 2^(bits-1)-1], zero_point 0
  log2        -> levels [0, 2^bits - 1] encoding powers 2^-q of (0, 1] inputs
  pot_channel -> symmetric with per-channel scale = shared / 2^alpha_c
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import QuantParams, Tensor

HISTOGRAM_BINS = 2048
EMA_ALPHA = 0.9
PERCENTILE_DEFAULT = 99.99
OMSE_GRID_POINTS = 120
OMSE_GRID_LO = 0.10
OMSE_GRID_HI = 1.20
PTF_MAX_EXPONENT = 3


class CalibrationError(ValueError):
    """Raised on unusable calibration input (e.g. NaN activations)."""


class DomainError(ValueError):
    """Raised when values fall outside a quantizer's declared domain."""


def qrange(bits: int, scheme: str) -> tuple[int, int]:
    if scheme == "affine" or scheme == "log2":
        return 0, (1 << bits) - 1
    if scheme in ("symmetric", "pot_channel"):
        hi = (1 << (bits - 1)) - 1
        return -hi, hi
    raise ValueError(f"unknown scheme {scheme!r}")


def storage_dtype(scheme: str) -> np.dtype:
    return np.dtype(np.int8) if scheme in ("symmetric", "pot_channel") else np.dtype(np.uint8)


def round_half_even(x: np.ndarray) -> np.ndarray:
    return np.rint(x)


# ---------------------------------------------------------------------------
# uniform quantize / dequantize


def quantize_array(x: np.ndarray, qp: QuantParams) -> np.ndarray:
    """q = clamp(round_half_even(x / scale) + zero_point, qmin, qmax).

    pot_channel applies the per-channel effective scale along the last axis;
    log2 is handled by :func:`log2_quantize`.
    """
    if qp.scheme == "log2":
        return log2_quantize(x, bits=qp.bits)
    x = np.asarray(x, dtype=np.float32)
    qmin, qmax = qrange(qp.bits, qp.scheme)
    if qp.scheme == "pot_channel":
        scale = pot_channel_scales(qp).astype(np.float32)
    else:
        scale = np.float32(qp.scale)
    q = round_half_even(x / scale) + qp.zero_point
    q = np.clip(q, qmin, qmax)
    return q.astype(storage_dtype(qp.scheme))


def dequantize_array(q: np.ndarray, qp: QuantParams) -> np.ndarray:
    """(q - zero_point) * scale back to f32 (2^-q for the log2 scheme)."""
    if qp.scheme == "log2":
        return log2_dequantize(q)
    levels = q.astype(np.float32) - np.float32(qp.zero_point)
    if qp.scheme == "pot_channel":
        return levels * pot_channel_scales(qp).astype(np.float32)
    return levels * np.float32(qp.scale)


def quantize(x: Tensor, qp: QuantParams) -> Tensor:
    if x.dtype != "f32":
        raise ValueError(f"quantize expects f32 input, got {x.dtype}")
    return Tensor(quantize_array(x.data, qp), qparams=qp)


def dequantize(q: Tensor, qp: QuantParams | None = None) -> Tensor:
    qp = qp or q.qparams
    if qp is None:
        raise ValueError("no quantization parameters available")
    return Tensor(dequantize_array(q.data, qp))


# ---------------------------------------------------------------------------
# log2 quantizer (post-softmax attention maps)


def log2_quantize(x: np.ndarray, bits: int = 4) -> np.ndarray:
    """q = clamp(round(-log2 x), 0, 2^bits - 1); x = 0 maps to the max level.

    Inputs must be post-softmax probabilities: values below 0 or above
    1 + 1e-6 are a domain error.
    """
    x = np.asarray(x, dtype=np.float32)
    if np.any(x < 0) or np.any(x > 1.0 + 1e-6):
        raise DomainError("log2 quantizer expects inputs in [0, 1]")
    qmax = (1 << bits) - 1
    with np.errstate(divide="ignore"):
        neg_log = -np.log2(x)
    q = np.where(x <= 0.0, qmax, np.clip(round_half_even(neg_log), 0, qmax))
    return q.astype(np.uint8)


def log2_dequantize(q: np.ndarray) -> np.ndarray:
    return np.exp2(-q.astype(np.float32))


# ---------------------------------------------------------------------------
# power-of-two-factor LayerNorm quantization


def ptf_layernorm_params(channel_ranges: np.ndarray, bits: int = 8) -> QuantParams:
    """Shared scale from the max channel range plus per-channel 2^alpha factors.

    alpha_c = clamp(round(log2(max_range / range_c)), 0, 3); zero-range
    channels clamp to 3. Effective channel scale = shared_scale / 2^alpha_c.
    """
    ranges = np.asarray(channel_ranges, dtype=np.float64)
    if ranges.ndim != 1 or ranges.size < 1:
        raise ValueError("channel_ranges must be a non-empty vector")
    if np.any(ranges < 0):
        raise ValueError("channel ranges must be non-negative")
    max_range = float(ranges.max())
    if max_range <= 0.0:
        return QuantParams(
            scheme="pot_channel", bits=bits, scale=1.0, zero_point=0,
            per_channel_factors=tuple([PTF_MAX_EXPONENT] * ranges.size),
        )
    shared_scale = max_range / ((1 << (bits - 1)) - 1)
    with np.errstate(divide="ignore"):
        alpha = round_half_even(np.log2(max_range / ranges))
    alpha = np.where(ranges <= 0.0, PTF_MAX_EXPONENT, alpha)
    alpha = np.clip(alpha, 0, PTF_MAX_EXPONENT).astype(np.int64)
    return QuantParams(
        scheme="pot_channel", bits=bits, scale=float(np.float32(shared_scale)),
        zero_point=0, per_channel_factors=tuple(int(a) for a in alpha),
    )


def pot_channel_scales(qp: QuantParams) -> np.ndarray:
    if qp.per_channel_factors is None:
        raise ValueError("pot_channel params lost their per-channel factors")
    alpha = np.asarray(qp.per_channel_factors, dtype=np.float32)
    return np.float32(qp.scale) / np.exp2(alpha)


# ---------------------------------------------------------------------------
# calibration statistics


@dataclass
class CalibrationStats:
    """Single-writer running statistics for one activation site.

    Tracks exact min/max, EMA-smoothed min/max, and a 2048-bin histogram over
    the observed range (rebinned proportionally when the range grows).
    """

    site: str
    count: int = 0
    min: float = float("inf")
    max: float = float("-inf")
    ema_min: float = float("nan")
    ema_max: float = float("nan")
    hist: np.ndarray = field(default_factory=lambda: np.zeros(HISTOGRAM_BINS, dtype=np.float64))
    hist_lo: float = 0.0
    hist_hi: float = 0.0

    @property
    def degenerate(self) -> bool:
        return self.count == 0 or not (self.max > self.min)


def _rebin(hist: np.ndarray, old_lo: float, old_hi: float, new_lo: float, new_hi: float) -> np.ndarray:
    """Redistribute bin mass onto new equal-width bins over a wider range."""
    n = hist.size
    new_hist = np.zeros(n, dtype=np.float64)
    if old_hi <= old_lo:
        new_hist[0] = hist.sum()
        return new_hist
    old_edges = np.linspace(old_lo, old_hi, n + 1)
    new_width = (new_hi - new_lo) / n
    for i in np.nonzero(hist)[0]:
        lo, hi = old_edges[i], old_edges[i + 1]
        j0 = int(np.clip((lo - new_lo) / new_width, 0, n - 1))
        j1 = int(np.clip((hi - new_lo) / new_width, 0, n - 1))
        if j0 == j1:
            new_hist[j0] += hist[i]
        else:
            # split mass proportionally across the covered new bins
            span = hi - lo
            for j in range(j0, j1 + 1):
                seg_lo = max(lo, new_lo + j * new_width)
                seg_hi = min(hi, new_lo + (j + 1) * new_width)
                if seg_hi > seg_lo:
                    new_hist[j] += hist[i] * (seg_hi - seg_lo) / span
    # keep the total mass exact despite fp splitting
    drift = hist.sum() - new_hist.sum()
    if new_hist.sum() > 0:
        new_hist[int(np.argmax(new_hist))] += drift
    return new_hist


def observe(stats: CalibrationStats, batch: np.ndarray, alpha: float = EMA_ALPHA) -> CalibrationStats:
    """Fold one batch of activations into the running statistics."""
    values = np.asarray(batch, dtype=np.float64).ravel()
    if values.size == 0:
        return stats
    if np.any(np.isnan(values)):
        raise CalibrationError(f"NaN activations at site {stats.site!r}")
    bmin = float(values.min())
    bmax = float(values.max())

    if stats.count == 0:
        stats.min, stats.max = bmin, bmax
        stats.ema_min, stats.ema_max = bmin, bmax
        stats.hist_lo, stats.hist_hi = bmin, bmax
    else:
        stats.min = min(stats.min, bmin)
        stats.max = max(stats.max, bmax)
        # r <- alpha*r + (1-alpha)*batch, written so a constant stream is an
        # exact fixed point in floating point
        stats.ema_min = bmin + alpha * (stats.ema_min - bmin)
        stats.ema_max = bmax + alpha * (stats.ema_max - bmax)
        if stats.min < stats.hist_lo or stats.max > stats.hist_hi:
            stats.hist = _rebin(stats.hist, stats.hist_lo, stats.hist_hi, stats.min, stats.max)
            stats.hist_lo, stats.hist_hi = stats.min, stats.max

    if stats.hist_hi > stats.hist_lo:
        counts, _ = np.histogram(values, bins=HISTOGRAM_BINS, range=(stats.hist_lo, stats.hist_hi))
        stats.hist += counts
    else:
        stats.hist[0] += values.size
    stats.count += values.size
    return stats


def merge_stats(a: CalibrationStats, b: CalibrationStats) -> CalibrationStats:
    """Union of two stats objects (min/max/histogram/count; EMA conservatively)."""
    if a.site != b.site:
        raise ValueError(f"cannot merge stats for {a.site!r} and {b.site!r}")
    if a.count == 0:
        return b
    if b.count == 0:
        return a
    out = CalibrationStats(site=a.site)
    out.count = a.count + b.count
    out.min = min(a.min, b.min)
    out.max = max(a.max, b.max)
    out.ema_min = min(a.ema_min, b.ema_min)
    out.ema_max = max(a.ema_max, b.ema_max)
    out.hist_lo, out.hist_hi = out.min, out.max
    out.hist = _rebin(a.hist, a.hist_lo, a.hist_hi, out.hist_lo, out.hist_hi)
    out.hist += _rebin(b.hist, b.hist_lo, b.hist_hi, out.hist_lo, out.hist_hi)
    return out


@dataclass
class ChannelStats:
    """Per-channel abs-max tracker for PTF LayerNorm calibration."""

    site: str
    absmax: np.ndarray | None = None

    def observe(self, batch: np.ndarray) -> None:
        x = np.asarray(batch, dtype=np.float64)
        if np.any(np.isnan(x)):
            raise CalibrationError(f"NaN activations at site {self.site!r}")
        flat = np.abs(x.reshape(-1, x.shape[-1])).max(axis=0)
        self.absmax = flat if self.absmax is None else np.maximum(self.absmax, flat)


# ---------------------------------------------------------------------------
# calibrators


def _params_from_range(lo: float, hi: float, bits: int, scheme: str) -> QuantParams:
    if not (hi > lo) or not np.isfinite(lo) or not np.isfinite(hi):
        # degenerate constant/zero data: declared fallback
        return QuantParams(scheme=scheme, bits=bits, scale=1.0, zero_point=0)
    qmin, qmax = qrange(bits, scheme)
    if scheme == "symmetric":
        scale = max(abs(lo), abs(hi)) / qmax
        return QuantParams(scheme=scheme, bits=bits, scale=float(np.float32(scale)), zero_point=0)
    if scheme == "affine":
        scale = (hi - lo) / (qmax - qmin)
        zp = int(np.clip(round_half_even(np.float64(-lo / scale)), qmin, qmax))
        return QuantParams(scheme=scheme, bits=bits, scale=float(np.float32(scale)), zero_point=zp)
    raise ValueError(f"cannot calibrate scheme {scheme!r} from a range")


def calibrate_minmax(stats: CalibrationStats, bits: int, scheme: str) -> QuantParams:
    if stats.count == 0:
        raise CalibrationError(f"no samples observed at site {stats.site!r}")
    return _params_from_range(stats.min, stats.max, bits, scheme)


def calibrate_ema(stats: CalibrationStats, bits: int, scheme: str) -> QuantParams:
    if stats.count == 0:
        raise CalibrationError(f"no samples observed at site {stats.site!r}")
    return _params_from_range(stats.ema_min, stats.ema_max, bits, scheme)


def _percentile_clip(stats: CalibrationStats, p: float) -> tuple[float, float]:
    """Clip range covering the central p percent of the histogram mass.

    Exact at p == 100 by construction: the cut positions land on the outer
    histogram edges, which track the running min/max bit-for-bit.
    """
    if p == 100.0:
        return stats.min, stats.max
    total = stats.hist.sum()
    if total <= 0 or stats.hist_hi <= stats.hist_lo:
        return stats.min, stats.max
    edges = np.linspace(stats.hist_lo, stats.hist_hi, HISTOGRAM_BINS + 1)
    cum = np.concatenate([[0.0], np.cumsum(stats.hist)])
    # guard the cut masses against fp noise in p/100 (e.g. 99.9/100)
    eps = 1e-9 * total
    lo_mass = (1.0 - p / 100.0) * total + eps
    hi_mass = (p / 100.0) * total - eps
    lo_idx = int(np.searchsorted(cum, lo_mass, side="right") - 1)
    hi_idx = int(np.searchsorted(cum, hi_mass, side="left"))
    lo_idx = max(0, min(lo_idx, HISTOGRAM_BINS))
    hi_idx = max(lo_idx + 1, min(hi_idx, HISTOGRAM_BINS))
    return float(edges[lo_idx]), float(edges[hi_idx])


def calibrate_percentile(
    stats: CalibrationStats, bits: int, scheme: str, p: float = PERCENTILE_DEFAULT
) -> QuantParams:
    if not (0.0 < p <= 100.0):
        raise ValueError(f"percentile must be in (0, 100], got {p}")
    if stats.count == 0:
        raise CalibrationError(f"no samples observed at site {stats.site!r}")
    lo, hi = _percentile_clip(stats, p)
    return _params_from_range(lo, hi, bits, scheme)


def quantization_mse(sample: np.ndarray, qp: QuantParams) -> float:
    x = np.asarray(sample, dtype=np.float32)
    err = dequantize_array(quantize_array(x, qp), qp).astype(np.float64) - x.astype(np.float64)
    return float(np.mean(err * err))


def calibrate_omse(
    stats: CalibrationStats, sample: np.ndarray, bits: int, scheme: str
) -> QuantParams:
    """Grid-scan the scale minimizing quantize-dequantize MSE on the sample.

    120 linearly spaced candidates between 0.10x and 1.20x of the minmax
    scale; the exact minmax scale is always included, so the returned MSE can
    never exceed minmax's.
    """
    base = calibrate_minmax(stats, bits, scheme)
    sample = np.asarray(sample, dtype=np.float32).ravel()
    if stats.degenerate or sample.size == 0:
        return base
    grid = np.linspace(OMSE_GRID_LO * base.scale, OMSE_GRID_HI * base.scale, OMSE_GRID_POINTS)
    candidates = [float(np.float32(s)) for s in grid]
    if base.scale not in candidates:
        candidates.append(base.scale)
    qmin, qmax = qrange(bits, scheme)
    best_qp, best_mse = None, np.inf
    for scale in candidates:
        if scale <= 0:
            continue
        if scheme == "affine":
            zp = int(np.clip(round_half_even(np.float64(-stats.min / scale)), qmin, qmax))
        else:
            zp = 0
        qp = QuantParams(scheme=scheme, bits=bits, scale=scale, zero_point=zp)
        mse = quantization_mse(sample, qp)
        if mse < best_mse:
            best_qp, best_mse = qp, mse
    return best_qp if best_qp is not None else base


CALIBRATORS = {
    "minmax": calibrate_minmax,
    "ema": calibrate_ema,
    "percentile": calibrate_percentile,
}


def subsample(values: np.ndarray, cap: int) -> np.ndarray:
    """Deterministic stride decimation used to bound OMSE calibration samples."""
    flat = np.asarray(values, dtype=np.float32).ravel()
    if flat.size <= cap:
        return flat.copy()
    stride = flat.size // cap
    return flat[:: stride][:cap].copy()
