"""Export torchvision-style shifted-window checkpoints to SWTA archives.

The exporter maps source keys onto the engine's canonical names (transposing
torch's [out, in] linear layout to [in, out] and reshaping the patch-embed
convolution), drops what the engine deliberately omits (relative position
bias tables and indices, the post-embed norm), and reports the accounting:
exported + dropped element counts must equal the checkpoint total.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import swta
from .reference import RefConfig, param_shapes

DROP_PATTERNS = (
    re.compile(r"\.attn\.relative_position_bias_table$"),
    re.compile(r"\.attn\.relative_position_index$"),
    re.compile(r"^features\.0\.2\."),  # post-embed norm: absent in the target
)


class ExportError(ValueError):
    pass


@dataclass
class ExportManifest:
    source: str
    config: RefConfig
    mapping: dict[str, str]
    dropped: list[str]
    exported_scalars: int
    dropped_scalars: int
    total_scalars: int
    synthesized: list[str] = field(default_factory=list)

    def to_json_dict(self) -> dict:
        return {
            "source": self.source,
            "config": json.loads(self.config.to_json()),
            "mapping": self.mapping,
            "dropped": self.dropped,
            "synthesized": self.synthesized,
            "exported_scalars": self.exported_scalars,
            "dropped_scalars": self.dropped_scalars,
            "total_scalars": self.total_scalars,
        }


def _load_state_dict(source) -> dict[str, torch.Tensor]:
    if isinstance(source, dict):
        state = source
    elif isinstance(source, torch.nn.Module):
        state = source.state_dict()
    else:
        state = torch.load(source, map_location="cpu", weights_only=True)
        if isinstance(state, dict) and "state_dict" in state and not any(
            isinstance(v, torch.Tensor) for v in state.values()
        ):
            state = state["state_dict"]
    if not all(isinstance(v, torch.Tensor) for v in state.values()):
        raise ExportError("source does not look like a tensor state dict")
    return dict(state)


def derive_config(state: dict[str, torch.Tensor], image_size: int = 224) -> tuple[RefConfig, list[int]]:
    """Infer the architecture from checkpoint shapes. Heads and window come
    from the relative-position-bias tables; returns (config, stage feature
    indices)."""
    if "features.0.0.weight" not in state:
        raise ExportError("unrecognized layout: missing patch-embed convolution "
                          "'features.0.0.weight'")
    conv = state["features.0.0.weight"]
    embed_dim, in_channels, patch, _ = conv.shape

    stage_features = sorted(
        int(m.group(1))
        for key in state
        for m in [re.match(r"features\.(\d+)\.0\.norm1\.weight$", key)]
        if m
    )
    if not stage_features:
        raise ExportError("unrecognized layout: no transformer blocks found")
    depths = []
    heads = []
    window = None
    for n in stage_features:
        js = sorted(
            int(m.group(1))
            for key in state
            for m in [re.match(rf"features\.{n}\.(\d+)\.norm1\.weight$", key)]
            if m
        )
        depths.append(len(js))
        table_key = f"features.{n}.0.attn.relative_position_bias_table"
        if table_key not in state:
            raise ExportError(f"cannot infer heads/window: {table_key} missing")
        rows, n_heads = state[table_key].shape
        heads.append(int(n_heads))
        w = (int(math.isqrt(rows)) + 1) // 2
        if (2 * w - 1) ** 2 != rows:
            raise ExportError(f"{table_key}: {rows} rows is not a (2w-1)^2 square")
        window = w if window is None else window
    mlp_hidden = state[f"features.{stage_features[0]}.0.mlp.0.weight"].shape[0]
    cfg = RefConfig(
        image_size=image_size,
        patch_size=int(patch),
        in_channels=int(in_channels),
        embed_dim=int(embed_dim),
        depths=tuple(depths),
        num_heads=tuple(heads),
        window_size=int(window),
        mlp_ratio=int(mlp_hidden // embed_dim),
        num_classes=int(state["head.bias"].shape[0]),
    )
    return cfg, stage_features


def _block_key_map(stage: int, feature_idx: int, block: int) -> dict[str, str]:
    src = f"features.{feature_idx}.{block}"
    dst = f"stage{stage}.block{block}"
    return {
        f"{src}.norm1.weight": f"{dst}.ln1.weight",
        f"{src}.norm1.bias": f"{dst}.ln1.bias",
        f"{src}.attn.qkv.weight": f"{dst}.qkv.weight",
        f"{src}.attn.qkv.bias": f"{dst}.qkv.bias",
        f"{src}.attn.proj.weight": f"{dst}.proj.weight",
        f"{src}.attn.proj.bias": f"{dst}.proj.bias",
        f"{src}.norm2.weight": f"{dst}.ln2.weight",
        f"{src}.norm2.bias": f"{dst}.ln2.bias",
        f"{src}.mlp.0.weight": f"{dst}.mlp1.weight",
        f"{src}.mlp.0.bias": f"{dst}.mlp1.bias",
        f"{src}.mlp.3.weight": f"{dst}.mlp2.weight",
        f"{src}.mlp.3.bias": f"{dst}.mlp2.bias",
    }


def export_checkpoint(source, out_path, image_size: int = 224) -> ExportManifest:
    """Write a canonical SWTA archive plus `<out>.manifest.json`."""
    state = _load_state_dict(source)
    cfg, stage_features = derive_config(state, image_size=image_size)

    mapping: dict[str, str] = {
        "features.0.0.weight": "patch_embed.weight",
        "features.0.0.bias": "patch_embed.bias",
        "norm.weight": "final_norm.gamma",
        "norm.bias": "final_norm.beta",
        "head.weight": "head.weight",
        "head.bias": "head.bias",
    }
    for stage, feature_idx in enumerate(stage_features):
        for block in range(cfg.depths[stage]):
            mapping.update(_block_key_map(stage, feature_idx, block))
        if stage < cfg.num_stages - 1:
            merge_idx = feature_idx + 1
            mapping[f"features.{merge_idx}.norm.weight"] = f"stage{stage}.merge.norm.weight"
            mapping[f"features.{merge_idx}.norm.bias"] = f"stage{stage}.merge.norm.bias"
            mapping[f"features.{merge_idx}.reduction.weight"] = f"stage{stage}.merge.reduce.weight"

    dropped = sorted(k for k in state if any(p.search(k) for p in DROP_PATTERNS))
    unmapped = sorted(set(state) - set(mapping) - set(dropped))
    if unmapped:
        raise ExportError(f"unmapped checkpoint keys: {unmapped}")
    missing = sorted(set(mapping) - set(state))
    if missing:
        raise ExportError(f"checkpoint is missing expected keys: {missing}")

    def convert(src_key: str, dst_key: str) -> np.ndarray:
        value = state[src_key].detach().cpu().numpy().astype(np.float32)
        if dst_key == "patch_embed.weight":
            # conv [out, in, kh, kw] -> flattened-patch [kh*kw*in, out]
            return np.ascontiguousarray(value.transpose(2, 3, 1, 0).reshape(-1, value.shape[0]))
        if dst_key.endswith(".weight") and value.ndim == 2:
            return np.ascontiguousarray(value.T)  # torch [out, in] -> [in, out]
        return value

    tensors = {dst: convert(src, dst) for src, dst in mapping.items()}
    expected = param_shapes(cfg)
    for name, shape in expected.items():
        if name not in tensors:
            raise ExportError(f"export incomplete: {name} missing")
        if tuple(tensors[name].shape) != shape:
            raise ExportError(
                f"{name}: exported shape {tensors[name].shape} != expected {shape}"
            )

    swta.save_archive([(name, tensors[name]) for name in expected], out_path)
    manifest = ExportManifest(
        source=str(source) if not isinstance(source, (dict, torch.nn.Module)) else "<in-memory>",
        config=cfg,
        mapping=mapping,
        dropped=dropped,
        exported_scalars=sum(int(v.size) for v in tensors.values()),
        dropped_scalars=sum(int(state[k].numel()) for k in dropped),
        total_scalars=sum(int(v.numel()) for v in state.values()),
    )
    manifest_path = Path(str(out_path) + ".manifest.json")
    manifest_path.write_text(json.dumps(manifest.to_json_dict(), indent=1, sort_keys=True))
    return manifest
