"""Precision-committed engines: build, serialize, and execute FP32/FP16/INT8
variants of the classifier.

The int8 execution path computes every Linear/MatMul in 8-bit integers with
32-bit accumulation (fused qkv GEMM, precomputed zero-point correction sums)
while Softmax/LayerNorm/GELU run in f32; the fqvit method additionally
quantizes post-softmax attention maps with the 4-bit log2 quantizer and
LayerNorm inputs with power-of-two-factor channel scaling. A reference path
re-evaluates the same committed quantization with direct zero-point-subtracted
integer levels accumulated exactly in f64; both paths round once through the
same dequantization formula, so their logits must agree bit-for-bit - that
cross-check is the correctness argument for the integer kernels.

FP16 is storage-and-rounding emulation: weights are committed to binary16 and
activations are rounded to binary16 at layer boundaries, while arithmetic runs
in f32. All integer kernels favor exactness over speed (numpy int32 GEMMs do
not hit BLAS).
"""

from __future__ import annotations

import json
import math
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import model
from .model import ModelConfig, ParameterSet
from .quant import (
    CalibrationError,
    CalibrationStats,
    ChannelStats,
    QuantParams,
    calibrate_minmax,
    calibrate_omse,
    calibrate_percentile,
    calibrate_ema,
    dequantize_array,
    log2_dequantize,
    observe,
    ptf_layernorm_params,
    quantize_array,
    round_half_even,
    subsample,
)
from .tensor import (
    ArchiveFormatError,
    Tensor,
    TensorArchive,
    archive_read,
    archive_write,
    gelu,
    layernorm,
    matmul,
    softmax,
)

ENGINE_MAGIC = b"SWQE"
ENGINE_VERSION = 1

PRECISION_TAGS = ("fp32", "fp16", "int8")
INT8_METHODS = ("minmax", "ema", "percentile", "omse", "fqvit", "default_range")
CALIBRATED_METHODS = ("minmax", "ema", "percentile", "omse", "fqvit")

TAG_CODES = {"fp32": 0, "fp16": 1, "int8": 2}
METHOD_CODES = {None: 0, "minmax": 1, "ema": 2, "percentile": 3, "omse": 4, "fqvit": 5, "default_range": 6}
TAG_FROM_CODE = {v: k for k, v in TAG_CODES.items()}
METHOD_FROM_CODE = {v: k for k, v in METHOD_CODES.items()}

DEFAULT_RANGE_LIMIT = 8.0  # plain-int8 emulation: fixed symmetric [-8, 8]
OMSE_SAMPLE_PER_IMAGE = 256
OMSE_SAMPLE_CAP = 8192


class EngineError(ValueError):
    pass


@dataclass(frozen=True)
class PrecisionMode:
    tag: str
    method: str | None = None

    def __post_init__(self):
        if self.tag not in PRECISION_TAGS:
            raise ValueError(f"unknown precision tag {self.tag!r}")
        if self.tag == "int8":
            if self.method not in INT8_METHODS:
                raise ValueError(f"int8 engines need a method from {INT8_METHODS}")
        elif self.method is not None:
            raise ValueError(f"{self.tag} engines take no method")

    @property
    def bits(self) -> tuple[int, int, int]:
        """(weight, activation, attention-map) bit widths."""
        if self.tag == "fp32":
            return (32, 32, 32)
        if self.tag == "fp16":
            return (16, 16, 16)
        return (8, 8, 4) if self.method == "fqvit" else (8, 8, 8)

    @classmethod
    def fp32(cls) -> "PrecisionMode":
        return cls("fp32")

    @classmethod
    def fp16(cls) -> "PrecisionMode":
        return cls("fp16")

    @classmethod
    def int8(cls, method: str) -> "PrecisionMode":
        return cls("int8", method)


# ---------------------------------------------------------------------------
# quantization site enumeration


def activation_sites(cfg: ModelConfig) -> list[str]:
    """Inputs of every quantized Linear/MatMul, plus post-softmax maps."""
    sites = ["patch_embed.in"]
    for i in range(cfg.num_stages):
        for j in range(cfg.depths[i]):
            p = f"stage{i}.block{j}"
            sites += [
                f"{p}.attn.in", f"{p}.attn.q", f"{p}.attn.k",
                f"{p}.attn.probs", f"{p}.attn.v", f"{p}.proj.in",
                f"{p}.mlp.in", f"{p}.mlp.mid",
            ]
        if i < cfg.num_stages - 1:
            sites.append(f"stage{i}.merge.reduce.in")
    sites.append("head.in")
    return sites


def norm_input_sites(cfg: ModelConfig) -> list[str]:
    """LayerNorm input sites; quantized only by the fqvit method (PTF)."""
    sites = []
    for i in range(cfg.num_stages):
        for j in range(cfg.depths[i]):
            sites += [f"stage{i}.block{j}.ln1.in", f"stage{i}.block{j}.ln2.in"]
        if i < cfg.num_stages - 1:
            sites.append(f"stage{i}.merge.norm.in")
    sites.append("final_norm.in")
    return sites


def is_probs_site(site: str) -> bool:
    return site.endswith(".attn.probs")


def quantized_weight_names(cfg: ModelConfig) -> list[str]:
    """Linear/projection weights committed to int8 (norm affine params stay f32)."""
    names = []
    for name in model.param_spec(cfg):
        if not name.endswith(".weight"):
            continue
        if ".ln1." in name or ".ln2." in name or ".merge.norm." in name:
            continue
        names.append(name)
    return names


# ---------------------------------------------------------------------------
# engine value type


@dataclass
class Engine:
    config: ModelConfig
    mode: PrecisionMode
    weights: dict[str, np.ndarray]
    weight_scales: dict[str, np.ndarray] = field(default_factory=dict)
    act_qparams: dict[str, QuantParams] = field(default_factory=dict)
    calibration_count: int = 0
    _runtime: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        expected = set(model.param_spec(self.config))
        if set(self.weights) != expected:
            raise EngineError("engine weights do not match the config's parameter set")
        if self.mode.tag == "int8":
            required = set(activation_sites(self.config))
            if self.mode.method == "fqvit":
                required |= set(norm_input_sites(self.config))
            if set(self.act_qparams) != required:
                missing = sorted(required - set(self.act_qparams))
                extra = sorted(set(self.act_qparams) - required)
                raise EngineError(f"activation table mismatch: missing={missing}, extra={extra}")
            if set(self.weight_scales) != set(quantized_weight_names(self.config)):
                raise EngineError("per-channel scale table does not cover the quantized weights")
        self._prepare()

    def _prepare(self) -> None:
        rt: dict = {}
        if self.mode.tag == "fp16":
            rt["f32"] = {
                name: w.astype(np.float32) if w.dtype == np.float16 else w
                for name, w in self.weights.items()
            }
        elif self.mode.tag == "int8":
            cache = {}
            for name in quantized_weight_names(self.config):
                q_w = self.weights[name]
                cache[name] = {
                    "q": q_w,
                    "q32": q_w.astype(np.int32),
                    "colsum": q_w.astype(np.int64).sum(axis=0),
                    "scales": self.weight_scales[name].astype(np.float64),
                }
            rt["int"] = cache
        self._runtime = rt


# ---------------------------------------------------------------------------
# execution strategies
#
# One topology walk (below) drives four behaviors; a strategy supplies the
# tensor taps and the Linear/MatMul arithmetic.


class _PlainStrategy:
    """Straight f32 compute; also the structural twin of model.forward."""

    def __init__(self, weights: dict[str, np.ndarray]):
        self.weights = weights

    def tap(self, site: str, x: np.ndarray) -> np.ndarray:
        return x

    def linear(self, site: str, name: str, x: np.ndarray, bias: bool = True) -> np.ndarray:
        y = matmul(x, self.weights[f"{name}.weight"])
        if bias:
            y = y + self.weights[f"{name}.bias"]
        return y

    def matmul_qk(self, q_site: str, k_site: str, q: np.ndarray, k: np.ndarray) -> np.ndarray:
        return matmul(self.tap(q_site, q), self.tap(k_site, k).swapaxes(-1, -2))

    def matmul_pv(self, p_site: str, v_site: str, probs: np.ndarray, v: np.ndarray) -> np.ndarray:
        return matmul(self.tap(p_site, probs), self.tap(v_site, v))


class _ObserveStrategy(_PlainStrategy):
    """Full-precision pass recording calibration statistics at every site."""

    def __init__(self, weights, stats: dict[str, CalibrationStats],
                 samples: dict[str, list[np.ndarray]], channel_stats: dict[str, ChannelStats]):
        super().__init__(weights)
        self.stats = stats
        self.samples = samples
        self.channel_stats = channel_stats

    def tap(self, site: str, x: np.ndarray) -> np.ndarray:
        if site in self.stats:
            observe(self.stats[site], x)
            self.samples[site].append(subsample(x, OMSE_SAMPLE_PER_IMAGE))
        if site in self.channel_stats:
            self.channel_stats[site].observe(x)
        return x

    def linear(self, site: str, name: str, x: np.ndarray, bias: bool = True) -> np.ndarray:
        return super().linear(site, name, self.tap(site, x), bias)


def _to_f16(x: np.ndarray) -> np.ndarray:
    return x.astype(np.float16).astype(np.float32)


class _F16Strategy(_PlainStrategy):
    """f32 arithmetic with binary16 storage rounding at layer boundaries."""

    def __init__(self, engine: Engine):
        super().__init__(engine._runtime["f32"])

    def tap(self, site: str, x: np.ndarray) -> np.ndarray:
        return _to_f16(x)

    def linear(self, site: str, name: str, x: np.ndarray, bias: bool = True) -> np.ndarray:
        return _to_f16(super().linear(site, name, _to_f16(x), bias))

    def matmul_qk(self, q_site, k_site, q, k):
        return _to_f16(super().matmul_qk(q_site, k_site, q, k))

    def matmul_pv(self, p_site, v_site, probs, v):
        return _to_f16(super().matmul_pv(p_site, v_site, probs, v))


def _dequant_acc(acc: np.ndarray, combined_scale, bias: np.ndarray | None) -> np.ndarray:
    """Single-rounding dequantization: exact accumulator * combined f64 scale
    (+ f32 bias in f64), rounded once to f32."""
    t = acc.astype(np.float64) * combined_scale
    if bias is not None:
        t = t + bias.astype(np.float64)
    return t.astype(np.float32)


class _Int8Strategy:
    """Production integer kernels: i8 operands, i32 accumulation, zero-point
    corrections via precomputed sums."""

    exact_reference = False

    def __init__(self, engine: Engine):
        self.engine = engine
        self.weights = engine.weights
        self.qp = engine.act_qparams
        self.cache = engine._runtime["int"]
        self.fqvit = engine.mode.method == "fqvit"

    def tap(self, site: str, x: np.ndarray) -> np.ndarray:
        # LayerNorm inputs: identity except under fqvit's PTF quantization
        if self.fqvit and site in self.qp:
            qp = self.qp[site]
            return dequantize_array(quantize_array(x, qp), qp)
        return x

    def linear(self, site: str, name: str, x: np.ndarray, bias: bool = True) -> np.ndarray:
        qp = self.qp[site]
        entry = self.cache[f"{name}.weight"]
        q_x = quantize_array(x, qp)
        acc = np.matmul(q_x.astype(np.int32), entry["q32"]).astype(np.int64)
        if qp.zero_point != 0:
            acc -= qp.zero_point * entry["colsum"][None, :]
        combined = np.float64(qp.scale) * entry["scales"]
        b = self.weights[f"{name}.bias"] if bias else None
        return _dequant_acc(acc, combined, b)

    def _affine_matmul(self, a_qp: QuantParams, b_qp: QuantParams,
                       a: np.ndarray, b: np.ndarray) -> np.ndarray:
        """(a - za) @ (b - zb) scaled, via the correction-sum identity."""
        q_a = quantize_array(a, a_qp).astype(np.int32)
        q_b = quantize_array(b, b_qp).astype(np.int32)
        acc = np.matmul(q_a, q_b).astype(np.int64)
        k = a.shape[-1]
        if a_qp.zero_point != 0:
            acc -= a_qp.zero_point * q_b.sum(axis=-2, keepdims=True).astype(np.int64)
        if b_qp.zero_point != 0:
            acc -= b_qp.zero_point * q_a.sum(axis=-1, keepdims=True).astype(np.int64)
        if a_qp.zero_point != 0 and b_qp.zero_point != 0:
            acc += k * a_qp.zero_point * b_qp.zero_point
        return _dequant_acc(acc, np.float64(a_qp.scale) * np.float64(b_qp.scale), None)

    def matmul_qk(self, q_site: str, k_site: str, q: np.ndarray, k: np.ndarray) -> np.ndarray:
        return self._affine_matmul(self.qp[q_site], self.qp[k_site], q, k.swapaxes(-1, -2))

    def matmul_pv(self, p_site: str, v_site: str, probs: np.ndarray, v: np.ndarray) -> np.ndarray:
        p_qp, v_qp = self.qp[p_site], self.qp[v_site]
        if p_qp.scheme != "log2":
            return self._affine_matmul(p_qp, v_qp, probs, v)
        # log2 probs: sum_t 2^(-q_t) * v_t computed as shifted-integer dot
        q_p = quantize_array(probs, p_qp)  # levels 0..15
        q_v = quantize_array(v, v_qp)
        max_level = (1 << p_qp.bits) - 1
        pow2 = np.left_shift(np.int64(1), max_level - q_p.astype(np.int64))
        levels_v = q_v.astype(np.int64) - v_qp.zero_point
        acc = np.matmul(pow2, levels_v)
        combined = np.float64(v_qp.scale) * math.ldexp(1.0, -max_level)
        return _dequant_acc(acc, combined, None)


class _Int8ReferenceStrategy(_Int8Strategy):
    """Fake-quant reference: the same committed quantizers, evaluated with
    direct zero-point-subtracted levels and exact f64 accumulation."""

    exact_reference = True

    def linear(self, site: str, name: str, x: np.ndarray, bias: bool = True) -> np.ndarray:
        qp = self.qp[site]
        entry = self.cache[f"{name}.weight"]
        levels = quantize_array(x, qp).astype(np.float64) - float(qp.zero_point)
        acc = np.matmul(levels, entry["q"].astype(np.float64))
        combined = np.float64(qp.scale) * entry["scales"]
        b = self.weights[f"{name}.bias"] if bias else None
        return _dequant_acc(acc, combined, b)

    def _affine_matmul(self, a_qp, b_qp, a, b):
        la = quantize_array(a, a_qp).astype(np.float64) - float(a_qp.zero_point)
        lb = quantize_array(b, b_qp).astype(np.float64) - float(b_qp.zero_point)
        acc = np.matmul(la, lb)
        return _dequant_acc(acc, np.float64(a_qp.scale) * np.float64(b_qp.scale), None)

    def matmul_pv(self, p_site: str, v_site: str, probs: np.ndarray, v: np.ndarray) -> np.ndarray:
        p_qp, v_qp = self.qp[p_site], self.qp[v_site]
        if p_qp.scheme != "log2":
            return self._affine_matmul(p_qp, v_qp, probs, v)
        q_p = quantize_array(probs, p_qp)
        q_v = quantize_array(v, v_qp)
        p_exact = log2_dequantize(q_p).astype(np.float64)
        levels_v = q_v.astype(np.float64) - float(v_qp.zero_point)
        acc = np.matmul(p_exact, levels_v)
        return _dequant_acc(acc, np.float64(v_qp.scale), None)


# ---------------------------------------------------------------------------
# the shared topology walk


def _walk(image: np.ndarray, cfg: ModelConfig, weights: dict[str, np.ndarray], strat) -> np.ndarray:
    """Mirror of model.forward with strategy hooks at every quantization site."""
    p = cfg.patch_size
    g = cfg.stage_grid(0)
    img = image.reshape(g, p, g, p, cfg.in_channels)
    flat = img.transpose(0, 2, 1, 3, 4).reshape(g * g, p * p * cfg.in_channels)
    tokens = strat.linear("patch_embed.in", "patch_embed", flat)
    x = tokens.reshape(g, g, cfg.embed_dim)

    for i in range(cfg.num_stages):
        for j in range(cfg.depths[i]):
            prefix = f"stage{i}.block{j}"
            h, w, c = x.shape
            heads = cfg.num_heads[i]
            head_dim = c // heads
            window = cfg.window_size
            shift = cfg.block_shift(i, j)
            mask = model.build_shift_mask(h, w, window, shift) if shift else None

            shortcut = x
            y = strat.tap(f"{prefix}.ln1.in", x)
            y = layernorm(y, weights[f"{prefix}.ln1.weight"], weights[f"{prefix}.ln1.bias"])
            y = model.cyclic_shift(y, shift)
            wins = model.window_partition(y, window)
            n_win, t, _ = wins.shape
            qkv = strat.linear(f"{prefix}.attn.in", f"{prefix}.qkv", wins.reshape(n_win * t, c))
            qkv = qkv.reshape(n_win, t, 3, heads, head_dim).transpose(2, 0, 3, 1, 4)
            q, k, v = qkv[0], qkv[1], qkv[2]
            scale = np.asarray(1.0 / math.sqrt(head_dim), dtype=np.float32)
            scores = strat.matmul_qk(f"{prefix}.attn.q", f"{prefix}.attn.k", q, k) * scale
            if mask is not None:
                scores = scores + mask[:, None, :, :]
            probs = softmax(scores, axis=-1)
            ctx = strat.matmul_pv(f"{prefix}.attn.probs", f"{prefix}.attn.v", probs, v)
            ctx = ctx.transpose(0, 2, 1, 3).reshape(n_win * t, c)
            attn_out = strat.linear(f"{prefix}.proj.in", f"{prefix}.proj", ctx)
            y = model.window_reverse(attn_out.reshape(n_win, t, c), window, h, w)
            y = model.cyclic_unshift(y, shift)
            x = shortcut + y

            shortcut = x
            y = strat.tap(f"{prefix}.ln2.in", x)
            y = layernorm(y, weights[f"{prefix}.ln2.weight"], weights[f"{prefix}.ln2.bias"])
            hidden = strat.linear(f"{prefix}.mlp.in", f"{prefix}.mlp1", y.reshape(h * w, c))
            hidden = gelu(hidden)
            out = strat.linear(f"{prefix}.mlp.mid", f"{prefix}.mlp2", hidden)
            x = shortcut + out.reshape(h, w, c)

        if i < cfg.num_stages - 1:
            h, w, c = x.shape
            gathered = np.concatenate(
                [x[0::2, 0::2, :], x[1::2, 0::2, :], x[0::2, 1::2, :], x[1::2, 1::2, :]], axis=-1
            )
            flat = gathered.reshape((h // 2) * (w // 2), 4 * c)
            flat = strat.tap(f"stage{i}.merge.norm.in", flat)
            normed = layernorm(
                flat, weights[f"stage{i}.merge.norm.weight"], weights[f"stage{i}.merge.norm.bias"]
            )
            reduced = strat.linear(f"stage{i}.merge.reduce.in", f"stage{i}.merge.reduce", normed, bias=False)
            x = reduced.reshape(h // 2, w // 2, 2 * c)

    d = cfg.final_dim
    pooled = x.reshape(-1, d).mean(axis=0)
    pooled = strat.tap("final_norm.in", pooled)
    normed = layernorm(pooled, weights["final_norm.gamma"], weights["final_norm.beta"])
    logits = strat.linear("head.in", "head", normed[None, :])[0]
    return logits


def plain_walk(image: np.ndarray, cfg: ModelConfig, params: ParameterSet) -> np.ndarray:
    """Identity-strategy walk; must agree bit-for-bit with model.forward."""
    return _walk(image, cfg, params, _PlainStrategy(params))


# ---------------------------------------------------------------------------
# weight quantization and calibration


def quantize_weight_per_channel(w: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Symmetric per-output-channel int8: scale_j = absmax(w[:, j]) / 127."""
    absmax = np.abs(w).max(axis=0)
    scales = np.where(absmax > 0, absmax / np.float32(127.0), np.float32(1.0)).astype(np.float32)
    q = np.clip(round_half_even(w / scales), -127, 127).astype(np.int8)
    return q, scales


@dataclass
class CalibrationResult:
    method: str
    sample_count: int
    site_qparams: dict[str, QuantParams]
    warnings: list[str] = field(default_factory=list)

    def to_json_dict(self) -> dict:
        sites = {}
        for site, qp in self.site_qparams.items():
            entry = {
                "scheme": qp.scheme, "bits": qp.bits,
                "scale": qp.scale, "zero_point": qp.zero_point,
            }
            if qp.per_channel_factors is not None:
                entry["exponents"] = list(qp.per_channel_factors)
            sites[site] = entry
        return {
            "method": self.method,
            "sample_count": self.sample_count,
            "sites": sites,
            "warnings": list(self.warnings),
        }


def calibrate_activations(
    params: ParameterSet,
    cfg: ModelConfig,
    method: str,
    calibration_images: list[np.ndarray],
) -> CalibrationResult:
    """Full-precision pass over the calibration set, then per-site parameter
    selection by `method`. Raises on an empty set or NaN activations."""
    if method not in CALIBRATED_METHODS:
        raise EngineError(f"method {method!r} does not use calibration")
    if not calibration_images:
        raise CalibrationError(f"calibration set is empty for method {method!r}")

    act_sites = activation_sites(cfg)
    stats = {s: CalibrationStats(site=s) for s in act_sites}
    samples: dict[str, list[np.ndarray]] = {s: [] for s in act_sites}
    channel_stats = (
        {s: ChannelStats(site=s) for s in norm_input_sites(cfg)} if method == "fqvit" else {}
    )
    strat = _ObserveStrategy(params, stats, samples, channel_stats)
    for image in calibration_images:
        _walk(image, cfg, params, strat)

    _, a_bits, att_bits = PrecisionMode.int8(method).bits
    site_qparams: dict[str, QuantParams] = {}
    warnings: list[str] = []
    for site in act_sites:
        st = stats[site]
        bits = att_bits if is_probs_site(site) else a_bits
        if method == "fqvit" and is_probs_site(site):
            site_qparams[site] = QuantParams(scheme="log2", bits=att_bits, scale=1.0, zero_point=0)
            continue
        if st.degenerate:
            warnings.append(f"degenerate activation range at {site}; falling back to scale 1")
        if method == "omse":
            sample = np.concatenate(samples[site]) if samples[site] else np.zeros(0, np.float32)
            site_qparams[site] = calibrate_omse(st, subsample(sample, OMSE_SAMPLE_CAP), bits, "affine")
        elif method == "percentile":
            site_qparams[site] = calibrate_percentile(st, bits, "affine")
        elif method == "ema":
            site_qparams[site] = calibrate_ema(st, bits, "affine")
        else:  # minmax, and fqvit's plain sites
            site_qparams[site] = calibrate_minmax(st, bits, "affine")
    for site, ch in channel_stats.items():
        if ch.absmax is None:
            raise CalibrationError(f"no observations at norm site {site}")
        site_qparams[site] = ptf_layernorm_params(ch.absmax, bits=a_bits)
    return CalibrationResult(
        method=method, sample_count=len(calibration_images),
        site_qparams=site_qparams, warnings=warnings,
    )


def default_range_qparams(cfg: ModelConfig) -> dict[str, QuantParams]:
    qp = QuantParams(
        scheme="symmetric", bits=8,
        scale=float(np.float32(DEFAULT_RANGE_LIMIT / 127.0)), zero_point=0,
    )
    return {site: qp for site in activation_sites(cfg)}


def build_engine(
    params: ParameterSet,
    cfg: ModelConfig,
    mode: PrecisionMode,
    calibration_images: list[np.ndarray] | None = None,
) -> Engine:
    """Commit trained parameters to a precision mode.

    fp16 rounds every weight to binary16 storage (biases and norm shifts stay
    f32); int8 quantizes linear weights per-output-channel symmetric and
    selects activation parameters by the mode's method (default_range skips
    calibration and fixes [-8, 8])."""
    model.validate_params(cfg, params)
    calibration_images = calibration_images or []

    if mode.tag == "fp32":
        return Engine(config=cfg, mode=mode, weights={k: v.copy() for k, v in params.items()})

    if mode.tag == "fp16":
        weights = {}
        for name, w in params.items():
            leaf = name.rsplit(".", 1)[-1]
            weights[name] = w.copy() if leaf in ("bias", "beta") else w.astype(np.float16)
        return Engine(config=cfg, mode=mode, weights=weights)

    # int8
    if mode.method == "default_range":
        act_qparams = default_range_qparams(cfg)
        count = 0
    else:
        result = calibrate_activations(params, cfg, mode.method, calibration_images)
        act_qparams = result.site_qparams
        count = result.sample_count

    weights: dict[str, np.ndarray] = {}
    weight_scales: dict[str, np.ndarray] = {}
    quantized = set(quantized_weight_names(cfg))
    for name, w in params.items():
        if name in quantized:
            q, scales = quantize_weight_per_channel(w)
            weights[name] = q
            weight_scales[name] = scales
        else:
            weights[name] = w.copy()
    return Engine(
        config=cfg, mode=mode, weights=weights, weight_scales=weight_scales,
        act_qparams=act_qparams, calibration_count=count,
    )


# ---------------------------------------------------------------------------
# execution


def engine_forward(engine: Engine, image: np.ndarray) -> np.ndarray:
    """Run one image through the committed engine; returns logits."""
    cfg = engine.config
    if image.shape != (cfg.image_size, cfg.image_size, cfg.in_channels):
        raise EngineError(f"image shape {image.shape} does not match engine config")
    image = np.ascontiguousarray(image, dtype=np.float32)
    if engine.mode.tag == "fp32":
        return model.forward(image, cfg, engine.weights)
    if engine.mode.tag == "fp16":
        strat = _F16Strategy(engine)
        return _walk(image, cfg, strat.weights, strat)
    strat = _Int8Strategy(engine)
    return _walk(image, cfg, engine.weights, strat)


def engine_forward_reference(engine: Engine, image: np.ndarray) -> np.ndarray:
    """Fake-quant reference path; must match engine_forward bit-for-bit on
    int8 engines (identical quantizers, exact accumulation, same rounding)."""
    if engine.mode.tag != "int8":
        return engine_forward(engine, image)
    cfg = engine.config
    image = np.ascontiguousarray(image, dtype=np.float32)
    strat = _Int8ReferenceStrategy(engine)
    return _walk(image, cfg, engine.weights, strat)


# ---------------------------------------------------------------------------
# serialization
#
# "SWQE": magic, u32 LE version, u8 precision tag, u8 method id, 3 x u8 bits
# (w/a/att), u32 LE config JSON length + JSON, embedded SWTA archive, and a
# trailing u32 LE CRC32 of all preceding bytes.


def _engine_archive(engine: Engine) -> TensorArchive:
    archive = TensorArchive()
    spec = model.param_spec(engine.config)
    quantized = set(quantized_weight_names(engine.config)) if engine.mode.tag == "int8" else set()
    for name in spec:
        w = engine.weights[name]
        if name in quantized:
            qp = QuantParams(scheme="symmetric", bits=8, scale=1.0, zero_point=0)
            archive.add(name, Tensor(w, qparams=qp))
            archive.add(f"{name}.channel_scales", Tensor(engine.weight_scales[name]))
        else:
            archive.add(name, Tensor(w))
    if engine.mode.tag == "int8":
        for site in sorted(engine.act_qparams):
            qp = engine.act_qparams[site]
            stored = QuantParams(scheme=qp.scheme, bits=qp.bits, scale=qp.scale, zero_point=qp.zero_point)
            # the site's parameters ride on a 1-element u8 tensor's qparams trailer
            archive.add(f"act.{site}", Tensor(np.zeros(1, np.uint8), qparams=stored))
            if qp.per_channel_factors is not None:
                exponents = np.asarray(qp.per_channel_factors, dtype=np.uint8)
                archive.add(f"act.{site}.exponents", Tensor(exponents, qparams=stored))
        archive.add(
            "meta.calibration_count",
            Tensor(np.asarray([engine.calibration_count], dtype=np.int32)),
        )
    return archive


def serialize_engine(engine: Engine) -> bytes:
    header = bytearray()
    header += ENGINE_MAGIC
    header += struct.pack("<I", ENGINE_VERSION)
    w, a, att = engine.mode.bits
    header += struct.pack(
        "<BBBBB", TAG_CODES[engine.mode.tag], METHOD_CODES[engine.mode.method], w, a, att
    )
    config_json = engine.config.to_json().encode("utf-8")
    header += struct.pack("<I", len(config_json))
    header += config_json
    body = archive_write(_engine_archive(engine))
    payload = bytes(header) + body
    return payload + struct.pack("<I", zlib.crc32(payload))


def save_engine(engine: Engine, path) -> int:
    blob = serialize_engine(engine)
    with open(path, "wb") as f:
        f.write(blob)
    return len(blob)


def load_engine_bytes(blob: bytes) -> Engine:
    if len(blob) < 17:
        raise ArchiveFormatError("engine file too short", 0)
    if blob[:4] != ENGINE_MAGIC:
        raise ArchiveFormatError("bad engine magic", 0)
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != ENGINE_VERSION:
        raise ArchiveFormatError(f"unsupported engine version {version}", 4)
    payload, crc_bytes = blob[:-4], blob[-4:]
    (crc,) = struct.unpack("<I", crc_bytes)
    if zlib.crc32(payload) != crc:
        raise ArchiveFormatError("CRC mismatch; engine file corrupt", len(blob) - 4)
    tag_code, method_code, w_bits, a_bits, att_bits = struct.unpack_from("<BBBBB", blob, 8)
    if tag_code not in TAG_FROM_CODE or method_code not in METHOD_FROM_CODE:
        raise ArchiveFormatError("unknown precision tag or method id", 8)
    (config_len,) = struct.unpack_from("<I", blob, 13)
    config_json = blob[17 : 17 + config_len].decode("utf-8")
    cfg = ModelConfig.from_json(config_json)
    mode = PrecisionMode(TAG_FROM_CODE[tag_code], METHOD_FROM_CODE[method_code])
    if mode.bits != (w_bits, a_bits, att_bits):
        raise ArchiveFormatError("bit-width triple inconsistent with precision mode", 8)
    archive = archive_read(blob[17 + config_len : -4])

    weights: dict[str, np.ndarray] = {}
    weight_scales: dict[str, np.ndarray] = {}
    act_qparams: dict[str, QuantParams] = {}
    exponents: dict[str, tuple[int, ...]] = {}
    calibration_count = 0
    for name, tensor in archive.entries:
        if name.startswith("act."):
            if name.endswith(".exponents"):
                exponents[name[4 : -len(".exponents")]] = tuple(int(v) for v in tensor.data)
            else:
                act_qparams[name[4:]] = tensor.qparams
        elif name == "meta.calibration_count":
            calibration_count = int(tensor.data[0])
        elif name.endswith(".channel_scales"):
            weight_scales[name[: -len(".channel_scales")]] = np.asarray(tensor.data)
        else:
            weights[name] = np.asarray(tensor.data)
    for site, exps in exponents.items():
        qp = act_qparams[site]
        act_qparams[site] = QuantParams(
            scheme=qp.scheme, bits=qp.bits, scale=qp.scale,
            zero_point=qp.zero_point, per_channel_factors=exps,
        )
    return Engine(
        config=cfg, mode=mode, weights=weights, weight_scales=weight_scales,
        act_qparams=act_qparams, calibration_count=calibration_count,
    )


def load_engine(path) -> Engine:
    with open(path, "rb") as f:
        return load_engine_bytes(f.read())


def engine_file_size_mb(path) -> float:
    import os

    return os.path.getsize(path) / float(1 << 20)
