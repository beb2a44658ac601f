"""Acceptance suite: one test per release criterion, each printing a
PASS/FAIL line (run with `pytest -s tests/test_acceptance.py` to see them).

The heavyweight shared state (synthetic corpus, trained checkpoint, two
ablation runs) is built once per session by fixtures; every criterion then
checks its own property at the tolerance pinned here.
"""

import json
import math
from pathlib import Path

import numpy as np
import pytest

from swinq import bench, data, engine, model, train
from swinq.cli import ABLATE_VARIANTS, main as cli_main
from swinq.quant import (
    CalibrationStats,
    calibrate_ema,
    calibrate_minmax,
    calibrate_omse,
    calibrate_percentile,
    dequantize_array,
    log2_quantize,
    observe,
    quantization_mse,
    quantize_array,
)
from swinq.tensor import QuantParams, softmax

SEED = 11
CLASSES = 4
PER_CLASS = 500
IMAGE_SIZE = 32


def _report(name: str, failed: AssertionError | None = None) -> None:
    status = "FAIL" if failed else "PASS"
    print(f"\n[acceptance] {name}: {status}")
    if failed:
        raise failed


class criterion:
    """Context manager printing the one-line PASS/FAIL verdict."""

    def __init__(self, name: str):
        self.name = name

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        print(f"\n[acceptance] {self.name}: {'FAIL' if exc else 'PASS'}")
        return False


@pytest.fixture(scope="session")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("acceptance")
    assert cli_main([
        "synth-data", "--out-dir", str(root), "--classes", str(CLASSES),
        "--per-class", str(PER_CLASS), "--size", str(IMAGE_SIZE), "--seed", str(SEED),
    ]) == 0
    assert cli_main([
        "split", "--data", str(root / "dataset"), "--out-dir", str(root), "--seed", str(SEED),
    ]) == 0
    return root


@pytest.fixture(scope="session")
def trained(workspace):
    assert cli_main([
        "train", "--data", str(workspace / "dataset"),
        "--manifest", str(workspace / "manifest.json"),
        "--preset", "small", "--epochs", "6", "--batch-size", "32",
        "--out-dir", str(workspace), "--seed", str(SEED),
    ]) == 0
    return workspace


def _run_ablation(workspace, out_name):
    out = workspace / out_name
    assert cli_main([
        "ablate", "--data", str(workspace / "dataset"),
        "--manifest", str(workspace / "manifest.json"),
        "--checkpoint", str(workspace / "checkpoint.swta"),
        "--model-config", str(workspace / "model_config.json"),
        "--iters", "20", "--warmup", "3",
        "--dataset-name", "synthetic",
        "--out-dir", str(out), "--seed", str(SEED),
    ]) == 0
    return out


@pytest.fixture(scope="session")
def ablation(trained):
    return _run_ablation(trained, "ablation_run1")


@pytest.fixture(scope="session")
def ablation_repeat(trained, ablation):
    return _run_ablation(trained, "ablation_run2")


# ---------------------------------------------------------------------------
# criteria


def test_parameter_count_band():
    with criterion("parameter-count: swin_t preset in [26.5e6, 29.5e6]"):
        count = model.param_count(model.PRESETS["swin_t"])
        assert 26.5e6 <= count <= 29.5e6, f"param_count {count}"


def test_size_ratio_bands():
    with criterion("size-ratio: fp16/fp32 in [0.45,0.60], int8/fp32 in [0.25,0.40]"):
        for preset in ("small", "swin_t"):
            cfg = model.PRESETS[preset]
            assert model.param_count(cfg) >= 100_000
            params = model.init_params(cfg, SEED)
            fp32 = len(engine.serialize_engine(
                engine.build_engine(params, cfg, engine.PrecisionMode.fp32())))
            fp16 = len(engine.serialize_engine(
                engine.build_engine(params, cfg, engine.PrecisionMode.fp16())))
            int8 = len(engine.serialize_engine(
                engine.build_engine(params, cfg, engine.PrecisionMode.int8("default_range"), [])))
            assert 0.45 <= fp16 / fp32 <= 0.60, f"{preset}: fp16 ratio {fp16 / fp32:.4f}"
            assert 0.25 <= int8 / fp32 <= 0.40, f"{preset}: int8 ratio {int8 / fp32:.4f}"


def test_report_arithmetic():
    with criterion("report-arithmetic: FPS == 1000/latency (48.87 -> 20.46 +- 0.01)"):
        row = bench.BenchRow(
            dataset="demo", method="original", bits=(32, 32, 32),
            accuracy=0.9825, precision=0.98, recall=0.98, f1=0.98,
            latency_ms=48.87, fps=1000.0 / 48.87, model_size_mb=107.0,
        )
        assert abs(row.fps - 20.46) <= 0.01, f"fps {row.fps}"
        csv_text, _ = bench.emit_report([row])
        assert "20.46" in csv_text
        for latency in (1000.0, 2.97, 37.01):
            r = bench.BenchRow(
                dataset="x", method="original", bits=(32, 32, 32),
                accuracy=0.9, precision=0.9, recall=0.9, f1=0.9,
                latency_ms=latency, fps=1000.0 / latency, model_size_mb=1.0,
            )
            assert abs(r.fps - 1000.0 / r.latency_ms) / r.fps <= 0.005


def _dense_attention(x, qkv_w, qkv_b, proj_w, proj_b, heads):
    t, c = x.shape
    hd = c // heads
    qkv = x.astype(np.float64) @ qkv_w.astype(np.float64) + qkv_b
    q, k, v = qkv[:, :c], qkv[:, c:2 * c], qkv[:, 2 * c:]
    out = np.zeros((t, c), np.float64)
    for h in range(heads):
        sl = slice(h * hd, (h + 1) * hd)
        scores = q[:, sl] @ k[:, sl].T / math.sqrt(hd)
        e = np.exp(scores - scores.max(axis=1, keepdims=True))
        probs = e / e.sum(axis=1, keepdims=True)
        out[:, sl] = probs @ v[:, sl]
    return out @ proj_w.astype(np.float64) + proj_b


def test_attention_oracle():
    with criterion("attention-oracle: single window == dense (1e-5); shift-0 == unshifted (1e-6)"):
        rng = np.random.default_rng(SEED)
        c, t, heads = 8, 16, 2
        for trial in range(50):
            qkv_w = rng.standard_normal((c, 3 * c)).astype(np.float32) * 0.3
            qkv_b = rng.standard_normal(3 * c).astype(np.float32) * 0.1
            proj_w = rng.standard_normal((c, c)).astype(np.float32) * 0.3
            proj_b = rng.standard_normal(c).astype(np.float32) * 0.1
            x = rng.standard_normal((1, t, c)).astype(np.float32)
            got = model.window_attention(x, qkv_w, qkv_b, proj_w, proj_b, heads, mask=None)
            want = _dense_attention(x[0], qkv_w, qkv_b, proj_w, proj_b, heads)
            err = np.max(np.abs(got[0].astype(np.float64) - want))
            assert err <= 1e-5, f"trial {trial}: dense-oracle deviation {err}"

        cfg = model.PRESETS["tiny"]
        params = model.init_params(cfg, SEED)
        zero_mask = np.zeros((4, 4, 4), np.float32)
        for trial in range(10):
            x = rng.standard_normal((4, 4, 8)).astype(np.float32)
            plain = model.swin_block(x, params, "stage0.block1", 2, 2, 0, None)
            masked = model.swin_block(x, params, "stage0.block1", 2, 2, 0, zero_mask)
            assert np.max(np.abs(plain - masked)) <= 1e-6


def test_gradient_check_full_sweep():
    with criterion("gradient-check: every tiny-config parameter vs central FD (rel err <= 1e-3)"):
        cfg = model.PRESETS["tiny"]
        base = model.init_params(cfg, 3)
        # widen projections so gradients flow at depth; f64 keeps the FD
        # oracle's noise floor far below the tolerance
        params = {
            k: v.astype(np.float64) * (10.0 if v.ndim == 2 else 1.0) for k, v in base.items()
        }
        rng = np.random.default_rng(SEED)
        image = rng.standard_normal((16, 16, 3))
        label = 1
        _, _, grads = train.backward(image, label, cfg, params)

        h = 1e-3
        worst = 0.0
        for name in params:
            flat = params[name].ravel()
            ga_flat = grads[name].ravel()
            for idx in range(flat.size):
                step = h * max(1.0, abs(flat[idx]))
                plus = params[name].copy()
                plus.ravel()[idx] += step
                minus = params[name].copy()
                minus.ravel()[idx] -= step
                fp = train.cross_entropy(model.forward(image, cfg, {**params, name: plus}), label)
                fm = train.cross_entropy(model.forward(image, cfg, {**params, name: minus}), label)
                gn = (fp - fm) / (2 * step)
                err = abs(ga_flat[idx] - gn) / max(abs(ga_flat[idx]), abs(gn), 1.0)
                worst = max(worst, err)
                assert err <= 1e-3, f"{name}[{idx}]: analytic {ga_flat[idx]} vs numeric {gn}"
        print(f"  worst relative gradient error: {worst:.2e}")

        # the f32 production gradients agree with the f64 reference
        _, _, grads32 = train.backward(
            image.astype(np.float32), label, cfg,
            {k: v.astype(np.float32) for k, v in params.items()},
        )
        for name in grads:
            diff = np.max(np.abs(grads32[name].astype(np.float64) - grads[name]))
            scale = max(1.0, float(np.max(np.abs(grads[name]))))
            assert diff / scale <= 1e-3


def _rows(path: Path) -> dict[str, dict]:
    return {r["method"]: r for r in json.loads((path / "rows.json").read_text())}


def _predictions(path: Path, label: str) -> list[int]:
    lines = (path / f"predictions_{label}.jsonl").read_text().strip().split("\n")
    return [json.loads(line)["pred"] for line in lines]


def test_end_to_end_quantization_degradation(ablation):
    with criterion("e2e-degradation: fp32 >= 0.90; int8 within 2.0 pts; fp16 within 0.5 pts; "
                   "agreement >= 98%"):
        rows = _rows(ablation)
        fp32_acc = rows["original"]["accuracy"]
        assert fp32_acc >= 0.90, f"fp32 test accuracy {fp32_acc}"
        for method in ("minmax", "ema", "omse", "percentile"):
            drop = (fp32_acc - rows[method]["accuracy"]) * 100.0
            assert drop <= 2.0, f"{method} dropped {drop:.2f} points"
        fp16_drop = abs(fp32_acc - rows["fp16"]["accuracy"]) * 100.0
        assert fp16_drop <= 0.5, f"fp16 drifted {fp16_drop:.2f} points"

        base = _predictions(ablation, "original")
        for method in ("minmax", "ema", "omse", "percentile"):
            preds = _predictions(ablation, method)
            agreement = float(np.mean(np.asarray(preds) == np.asarray(base)))
            assert agreement >= 0.98, f"{method} top-1 agreement {agreement:.4f}"
        fp16_agree = float(np.mean(
            np.asarray(_predictions(ablation, "fp16")) == np.asarray(base)
        ))
        assert fp16_agree >= 0.99, f"fp16 top-1 agreement {fp16_agree:.4f}"


def test_calibrator_properties():
    with criterion("calibrators: percentile(100)==minmax; EMA const-range == minmax; "
                   "OMSE MSE <= minmax MSE x100"):
        rng = np.random.default_rng(SEED)
        # percentile at p=100 is exactly minmax
        stats = CalibrationStats(site="s")
        for _ in range(4):
            observe(stats, rng.standard_normal(512).astype(np.float32))
        for scheme in ("affine", "symmetric"):
            assert calibrate_percentile(stats, 8, scheme, p=100.0) == \
                calibrate_minmax(stats, 8, scheme)

        # EMA over constant-range streams
        for alpha in (0.0, 0.5, 0.9):
            st = CalibrationStats(site="e")
            for _ in range(6):
                observe(st, np.array([-1.5, 2.5], np.float32), alpha=alpha)
            assert calibrate_ema(st, 8, "affine") == calibrate_minmax(st, 8, "affine")

        # OMSE never worse than minmax on 100 random samples
        for i in range(100):
            sample = (rng.standard_normal(400) * rng.uniform(0.1, 3.0)).astype(np.float32)
            st = CalibrationStats(site=f"o{i}")
            observe(st, sample)
            mm = calibrate_minmax(st, 8, "symmetric")
            best = calibrate_omse(st, sample, 8, "symmetric")
            assert quantization_mse(sample, best) <= quantization_mse(sample, mm) + 1e-15


def test_quantizer_bounds():
    with criterion("quantizer-bounds: 1e6 round-trips <= scale/2 + 1 ulp; monotone; "
                   "log2 {1.0->0, 0.5->1, 0.3->2}"):
        rng = np.random.default_rng(SEED)
        lo, hi = -2.0, 6.0
        scale = (hi - lo) / 255.0
        qp = QuantParams(scheme="affine", bits=8, scale=scale,
                         zero_point=int(round(-lo / scale)))
        x = rng.uniform(lo, hi, size=1_000_000).astype(np.float32)
        back = dequantize_array(quantize_array(x, qp), qp)
        bound = qp.scale / 2 + float(np.spacing(np.float32(hi)))
        worst = float(np.max(np.abs(back - x)))
        assert worst <= bound, f"round-trip error {worst} > {bound}"

        sorted_x = np.sort(rng.uniform(lo, hi, size=100_000).astype(np.float32))
        q = quantize_array(sorted_x, qp).astype(np.int32)
        assert np.all(np.diff(q) >= 0)

        levels = log2_quantize(np.array([1.0, 0.5, 0.3], np.float32))
        assert levels.tolist() == [0, 1, 2]


def test_kernel_equivalence(trained):
    with criterion("kernel-equivalence: int8 integer path == fake-quant reference, "
                   "bit-identical, 20 images x 6 methods"):
        from swinq.model import params_from_archive
        from swinq.tensor import archive_load

        cfg = model.ModelConfig.from_json((trained / "model_config.json").read_text())
        params = params_from_archive(archive_load(trained / "checkpoint.swta"))
        index = data.DatasetIndex.load(trained / "manifest.json")
        index.root = str(trained / "dataset")
        spec = data.PreprocessSpec.synthetic(cfg.image_size)
        calib = [data.load_sample(index, s, spec) for s in data.calibration_samples(index)]

        rng = np.random.default_rng(SEED)
        test_images = [
            rng.uniform(-1, 1, (cfg.image_size, cfg.image_size, 3)).astype(np.float32)
            for _ in range(20)
        ]
        for method in engine.INT8_METHODS:
            eng = engine.build_engine(
                params, cfg, engine.PrecisionMode.int8(method),
                calib if method != "default_range" else [],
            )
            for i, img in enumerate(test_images):
                a = engine.engine_forward(eng, img)
                b = engine.engine_forward_reference(eng, img)
                assert np.array_equal(a, b), f"{method}, image {i}: paths diverged"


TIMING_FIELDS = {"latency_ms", "fps"}


def test_ablate_determinism(ablation, ablation_repeat):
    with criterion("determinism: repeated ablate -> byte-identical engines and metrics "
                   "(timing excluded)"):
        for label in (v[0] for v in ABLATE_VARIANTS):
            a = (ablation / f"engine_{label}.swqe").read_bytes()
            b = (ablation_repeat / f"engine_{label}.swqe").read_bytes()
            assert a == b, f"engine_{label}.swqe differs between runs"
            pa = (ablation / f"predictions_{label}.jsonl").read_bytes()
            pb = (ablation_repeat / f"predictions_{label}.jsonl").read_bytes()
            assert pa == pb, f"predictions_{label}.jsonl differs between runs"

        rows_a, rows_b = _rows(ablation), _rows(ablation_repeat)
        assert set(rows_a) == set(rows_b)
        assert len(rows_a) == 9
        for label in rows_a:
            for field, value in rows_a[label].items():
                if field in TIMING_FIELDS:
                    continue
                assert rows_b[label][field] == value, f"{label}.{field} differs"


def test_ablation_report_shape(ablation):
    with criterion("ablation-report: 9 method rows, Table-ordering, FPS identity"):
        rows = json.loads((ablation / "rows.json").read_text())
        assert [r["method"] for r in rows] == [
            "original", "minmax", "ema", "omse", "percentile",
            "fqvit", "int8", "default_range", "fp16",
        ]
        for r in rows:
            assert abs(r["fps"] - 1000.0 / r["latency_ms"]) / r["fps"] <= 0.005
        csv_lines = (ablation / "report.csv").read_text().strip().split("\n")
        assert len(csv_lines) == 10
