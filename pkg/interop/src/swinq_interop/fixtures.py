"""Golden-fixture generation: deterministic parameters and inputs plus
reference outputs for each architectural piece, stored as SWTA archives so the
engine side needs no extra parser.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch

from . import reference, swta

DEFAULT_CONFIG = reference.RefConfig(
    image_size=32, patch_size=4, in_channels=3, embed_dim=32,
    depths=(2, 2), num_heads=(2, 4), window_size=4, mlp_ratio=4, num_classes=4,
)

FIXTURE_OPS = ("patch_embed", "wmsa_block", "swmsa_block", "patch_merge", "forward")


def compute_fixtures(
    cfg: reference.RefConfig, seed: int, params: dict[str, np.ndarray] | None = None
) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray]]:
    """Returns (params, fixture tensors named fx.<op>.<input|output>)."""
    if cfg.num_stages < 2:
        raise ValueError("fixture config needs at least two stages for patch_merge")
    if params is None:
        params = reference.random_params(cfg, seed)
    rng = np.random.default_rng(seed + 1)
    image = rng.standard_normal((cfg.image_size, cfg.image_size, cfg.in_channels)).astype(np.float32)

    fx: dict[str, np.ndarray] = {}
    with torch.no_grad():
        tokens = reference.patch_embed(torch.from_numpy(image), cfg, params)
        fx["fx.patch_embed.input"] = image
        fx["fx.patch_embed.output"] = tokens.numpy().astype(np.float32)

        g = cfg.stage_grid(0)
        grid = tokens.reshape(g, g, cfg.embed_dim)
        fx["fx.wmsa_block.input"] = grid.numpy().astype(np.float32)
        wmsa_out = reference.attention_block(grid, cfg, params, stage=0, block=0)
        fx["fx.wmsa_block.output"] = wmsa_out.numpy().astype(np.float32)

        fx["fx.swmsa_block.input"] = fx["fx.wmsa_block.output"]
        swmsa_out = reference.attention_block(wmsa_out, cfg, params, stage=0, block=1)
        fx["fx.swmsa_block.output"] = swmsa_out.numpy().astype(np.float32)

        fx["fx.patch_merge.input"] = fx["fx.swmsa_block.output"]
        merged = reference.patch_merge(swmsa_out, cfg, params, stage=0)
        fx["fx.patch_merge.output"] = merged.numpy().astype(np.float32)

    fx["fx.forward.input"] = image
    fx["fx.forward.output"] = reference.forward(image, cfg, params)
    return params, fx


def make_fixtures(cfg: reference.RefConfig, seed: int, out_dir) -> dict:
    """Write config.json, params.swta, fixtures.swta, and manifest.json."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    params, fx = compute_fixtures(cfg, seed)

    (out_dir / "config.json").write_text(cfg.to_json())
    swta.save_archive(
        [(name, params[name]) for name in reference.param_shapes(cfg)], out_dir / "params.swta"
    )
    swta.save_archive(sorted(fx.items()), out_dir / "fixtures.swta")
    manifest = {
        "seed": seed,
        "config": json.loads(cfg.to_json()),
        "files": ["config.json", "params.swta", "fixtures.swta"],
        "ops": list(FIXTURE_OPS),
        "simplifications": [
            "no relative position bias",
            "erf gelu",
            "additive -1e9 shift mask",
            "mean-pool before final norm and head",
        ],
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return manifest
