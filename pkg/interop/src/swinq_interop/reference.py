"""Torch reference implementation of the shifted-window classifier.

Written against the engine's documented semantics rather than its code: erf
GELU, population-variance LayerNorm (eps 1e-5), additive -1e9 boundary masks,
no relative position bias, patch-merge gather order (even-even, odd-even,
even-odd, odd-odd), merge reduction without bias, shift of window//2 in odd
blocks except when the token grid equals the window, and mean-pool -> norm ->
head. Any disagreement beyond float noise with the numpy engine is a bug in
one of the two implementations, not a tolerance problem.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, asdict

import numpy as np
import torch
import torch.nn.functional as F

MASK_NEG = -1e9


@dataclass(frozen=True)
class RefConfig:
    image_size: int
    patch_size: int
    in_channels: int
    embed_dim: int
    depths: tuple[int, ...]
    num_heads: tuple[int, ...]
    window_size: int
    mlp_ratio: int
    num_classes: int

    def __post_init__(self):
        object.__setattr__(self, "depths", tuple(self.depths))
        object.__setattr__(self, "num_heads", tuple(self.num_heads))

    @property
    def num_stages(self) -> int:
        return len(self.depths)

    def stage_dim(self, i: int) -> int:
        return self.embed_dim * (1 << i)

    def stage_grid(self, i: int) -> int:
        return self.image_size // self.patch_size // (1 << i)

    @property
    def final_dim(self) -> int:
        return self.stage_dim(max(self.num_stages - 1, 0))

    def block_shift(self, stage: int, block: int) -> int:
        if block % 2 == 0 or self.stage_grid(stage) == self.window_size:
            return 0
        return self.window_size // 2

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "RefConfig":
        return cls(**json.loads(text))


def param_shapes(cfg: RefConfig) -> dict[str, tuple[int, ...]]:
    """Canonical checkpoint layout the engine expects."""
    shapes: dict[str, tuple[int, ...]] = {}
    patch_in = cfg.patch_size * cfg.patch_size * cfg.in_channels
    shapes["patch_embed.weight"] = (patch_in, cfg.embed_dim)
    shapes["patch_embed.bias"] = (cfg.embed_dim,)
    for i in range(cfg.num_stages):
        c = cfg.stage_dim(i)
        hidden = cfg.mlp_ratio * c
        for j in range(cfg.depths[i]):
            p = f"stage{i}.block{j}"
            shapes[f"{p}.ln1.weight"] = (c,)
            shapes[f"{p}.ln1.bias"] = (c,)
            shapes[f"{p}.qkv.weight"] = (c, 3 * c)
            shapes[f"{p}.qkv.bias"] = (3 * c,)
            shapes[f"{p}.proj.weight"] = (c, c)
            shapes[f"{p}.proj.bias"] = (c,)
            shapes[f"{p}.ln2.weight"] = (c,)
            shapes[f"{p}.ln2.bias"] = (c,)
            shapes[f"{p}.mlp1.weight"] = (c, hidden)
            shapes[f"{p}.mlp1.bias"] = (hidden,)
            shapes[f"{p}.mlp2.weight"] = (hidden, c)
            shapes[f"{p}.mlp2.bias"] = (c,)
        if i < cfg.num_stages - 1:
            shapes[f"stage{i}.merge.norm.weight"] = (4 * c,)
            shapes[f"stage{i}.merge.norm.bias"] = (4 * c,)
            shapes[f"stage{i}.merge.reduce.weight"] = (4 * c, 2 * c)
    shapes["final_norm.gamma"] = (cfg.final_dim,)
    shapes["final_norm.beta"] = (cfg.final_dim,)
    shapes["head.weight"] = (cfg.final_dim, cfg.num_classes)
    shapes["head.bias"] = (cfg.num_classes,)
    return shapes


def random_params(cfg: RefConfig, seed: int, zero_residual_paths: bool = False) -> dict[str, np.ndarray]:
    """Deterministic fixture parameters. Norm weights hover around 1, biases
    are small, projections are N(0, 0.1). With zero_residual_paths, all
    attention/MLP projections are zeroed so blocks reduce to the identity."""
    rng = np.random.default_rng(seed)
    params: dict[str, np.ndarray] = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        residual_path = any(part in name for part in (".qkv.", ".proj.", ".mlp1.", ".mlp2."))
        if zero_residual_paths and residual_path:
            params[name] = np.zeros(shape, dtype=np.float32)
        elif leaf in ("bias", "beta"):
            params[name] = (rng.standard_normal(shape) * 0.05).astype(np.float32)
        elif leaf == "gamma" or (leaf == "weight" and (".ln" in name or ".merge.norm." in name)):
            params[name] = (1.0 + rng.standard_normal(shape) * 0.1).astype(np.float32)
        else:
            params[name] = (rng.standard_normal(shape) * 0.1).astype(np.float32)
    return params


def _t(params: dict[str, np.ndarray], name: str) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(params[name]))


def patch_embed(image: torch.Tensor, cfg: RefConfig, params) -> torch.Tensor:
    p = cfg.patch_size
    g = cfg.image_size // p
    x = image.reshape(g, p, g, p, cfg.in_channels).permute(0, 2, 1, 3, 4)
    x = x.reshape(g * g, p * p * cfg.in_channels)
    return x @ _t(params, "patch_embed.weight") + _t(params, "patch_embed.bias")


def shift_mask(size: int, window: int, shift: int) -> torch.Tensor:
    """[num_windows, T, T] additive mask from the three-band region canvas."""
    bands = torch.zeros(size, dtype=torch.long)
    bands[size - window :] = 1
    bands[size - shift :] = 2
    canvas = bands[:, None] * 3 + bands[None, :]
    wins = (
        canvas.reshape(size // window, window, size // window, window)
        .permute(0, 2, 1, 3)
        .reshape(-1, window * window)
    )
    blocked = wins[:, :, None] != wins[:, None, :]
    return torch.where(blocked, torch.tensor(MASK_NEG), torch.tensor(0.0)).float()


def attention_block(
    x: torch.Tensor, cfg: RefConfig, params, stage: int, block: int
) -> torch.Tensor:
    """One transformer block on an [H, W, C] token grid."""
    prefix = f"stage{stage}.block{block}"
    h, w, c = x.shape
    heads = cfg.num_heads[stage]
    head_dim = c // heads
    window = cfg.window_size
    shift = cfg.block_shift(stage, block)

    shortcut = x
    y = F.layer_norm(x, (c,), _t(params, f"{prefix}.ln1.weight"), _t(params, f"{prefix}.ln1.bias"))
    if shift:
        y = torch.roll(y, shifts=(-shift, -shift), dims=(0, 1))
    wins = (
        y.reshape(h // window, window, w // window, window, c)
        .permute(0, 2, 1, 3, 4)
        .reshape(-1, window * window, c)
    )
    n_win, t, _ = wins.shape
    qkv = wins.reshape(n_win * t, c) @ _t(params, f"{prefix}.qkv.weight") + _t(params, f"{prefix}.qkv.bias")
    qkv = qkv.reshape(n_win, t, 3, heads, head_dim).permute(2, 0, 3, 1, 4)
    q, k, v = qkv[0], qkv[1], qkv[2]
    scores = (q @ k.transpose(-1, -2)) / math.sqrt(head_dim)
    if shift:
        scores = scores + shift_mask(h, window, shift)[:, None, :, :]
    probs = F.softmax(scores, dim=-1)
    ctx = (probs @ v).permute(0, 2, 1, 3).reshape(n_win * t, c)
    attn = ctx @ _t(params, f"{prefix}.proj.weight") + _t(params, f"{prefix}.proj.bias")
    y = (
        attn.reshape(h // window, w // window, window, window, c)
        .permute(0, 2, 1, 3, 4)
        .reshape(h, w, c)
    )
    if shift:
        y = torch.roll(y, shifts=(shift, shift), dims=(0, 1))
    x = shortcut + y

    shortcut = x
    y = F.layer_norm(x, (c,), _t(params, f"{prefix}.ln2.weight"), _t(params, f"{prefix}.ln2.bias"))
    hidden = F.gelu(y.reshape(h * w, c) @ _t(params, f"{prefix}.mlp1.weight") + _t(params, f"{prefix}.mlp1.bias"))
    out = hidden @ _t(params, f"{prefix}.mlp2.weight") + _t(params, f"{prefix}.mlp2.bias")
    return shortcut + out.reshape(h, w, c)


def patch_merge(x: torch.Tensor, cfg: RefConfig, params, stage: int) -> torch.Tensor:
    h, w, c = x.shape
    gathered = torch.cat(
        [x[0::2, 0::2, :], x[1::2, 0::2, :], x[0::2, 1::2, :], x[1::2, 1::2, :]], dim=-1
    )
    flat = gathered.reshape((h // 2) * (w // 2), 4 * c)
    normed = F.layer_norm(
        flat, (4 * c,),
        _t(params, f"stage{stage}.merge.norm.weight"), _t(params, f"stage{stage}.merge.norm.bias"),
    )
    return (normed @ _t(params, f"stage{stage}.merge.reduce.weight")).reshape(h // 2, w // 2, 2 * c)


def forward(image: np.ndarray, cfg: RefConfig, params: dict[str, np.ndarray]) -> np.ndarray:
    """Full reference forward pass; returns logits as f32 numpy."""
    with torch.no_grad():
        x = patch_embed(torch.from_numpy(np.ascontiguousarray(image)), cfg, params)
        g = cfg.stage_grid(0)
        x = x.reshape(g, g, cfg.embed_dim)
        for i in range(cfg.num_stages):
            for j in range(cfg.depths[i]):
                x = attention_block(x, cfg, params, i, j)
            if i < cfg.num_stages - 1:
                x = patch_merge(x, cfg, params, i)
        d = cfg.final_dim
        pooled = x.reshape(-1, d).mean(dim=0)
        normed = F.layer_norm(pooled, (d,), _t(params, "final_norm.gamma"), _t(params, "final_norm.beta"))
        logits = normed @ _t(params, "head.weight") + _t(params, "head.bias")
    return logits.numpy().astype(np.float32)
