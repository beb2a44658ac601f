"""Secondary acceptance: the engine reproduces the torch reference fixtures
within 1e-4 max-abs at every captured stage, and the exported checkpoint
passes primary-side loading with exact parameter accounting."""

import numpy as np
import pytest

from swinq import model as swinq_model
from swinq.tensor import archive_load

from swinq_interop.fixtures import DEFAULT_CONFIG, make_fixtures

TOLERANCE = 1e-4


@pytest.fixture(scope="module")
def fixture_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("golden")
    make_fixtures(DEFAULT_CONFIG, seed=2024, out_dir=out)
    return out


@pytest.fixture(scope="module")
def loaded(fixture_dir):
    cfg = swinq_model.ModelConfig.from_json((fixture_dir / "config.json").read_text())
    params = swinq_model.params_from_archive(archive_load(fixture_dir / "params.swta"))
    swinq_model.validate_params(cfg, params)
    fx = {name: np.asarray(t.data) for name, t in archive_load(fixture_dir / "fixtures.swta").entries}
    return cfg, params, fx


def _check(name, got, want):
    err = float(np.max(np.abs(got.astype(np.float64) - want.astype(np.float64))))
    assert err <= TOLERANCE, f"{name}: max-abs deviation {err}"
    print(f"\n[secondary-acceptance] {name}: PASS (max-abs {err:.2e})")


def test_patch_embed_fixture(loaded):
    cfg, params, fx = loaded
    got = swinq_model.patch_embed(
        fx["fx.patch_embed.input"], params["patch_embed.weight"],
        params["patch_embed.bias"], cfg.patch_size,
    )
    _check("patch_embed", got, fx["fx.patch_embed.output"])


def test_wmsa_block_fixture(loaded):
    cfg, params, fx = loaded
    got = swinq_model.swin_block(
        fx["fx.wmsa_block.input"], params, "stage0.block0",
        heads=cfg.num_heads[0], window=cfg.window_size, shift=0, mask=None,
    )
    _check("wmsa_block", got, fx["fx.wmsa_block.output"])


def test_swmsa_block_fixture(loaded):
    cfg, params, fx = loaded
    x = fx["fx.swmsa_block.input"]
    shift = cfg.block_shift(0, 1)
    assert shift > 0, "shifted fixture must actually shift"
    mask = swinq_model.build_shift_mask(x.shape[0], x.shape[1], cfg.window_size, shift)
    got = swinq_model.swin_block(
        x, params, "stage0.block1",
        heads=cfg.num_heads[0], window=cfg.window_size, shift=shift, mask=mask,
    )
    _check("swmsa_block", got, fx["fx.swmsa_block.output"])


def test_patch_merge_fixture(loaded):
    cfg, params, fx = loaded
    got = swinq_model.patch_merge(
        fx["fx.patch_merge.input"],
        params["stage0.merge.norm.weight"], params["stage0.merge.norm.bias"],
        params["stage0.merge.reduce.weight"],
    )
    _check("patch_merge", got, fx["fx.patch_merge.output"])


def test_full_forward_fixture(loaded):
    cfg, params, fx = loaded
    got = swinq_model.forward(fx["fx.forward.input"], cfg, params)
    _check("forward", got, fx["fx.forward.output"])


def test_exported_swin_t_passes_accounting(tmp_path):
    torchvision = pytest.importorskip("torchvision")
    from swinq_interop.export import export_checkpoint

    state = torchvision.models.swin_t(weights=None).state_dict()
    out = tmp_path / "swin_t.swta"
    manifest = export_checkpoint(state, out)

    params = swinq_model.params_from_archive(archive_load(out))
    cfg = swinq_model.ModelConfig.from_json(manifest.config.to_json())
    swinq_model.validate_params(cfg, params)
    assert swinq_model.param_count(cfg) == manifest.exported_scalars
    assert manifest.exported_scalars + manifest.dropped_scalars == manifest.total_scalars
    assert 26.5e6 <= manifest.total_scalars <= 29.5e6
    print(f"\n[secondary-acceptance] export-accounting: PASS "
          f"({manifest.exported_scalars:,} exported + {manifest.dropped_scalars:,} dropped)")
