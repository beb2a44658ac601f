"""Hierarchical shifted-window transformer classifier.

Patch embedding, alternating window / shifted-window multi-head attention
blocks with additive masks, patch merging between stages, global average
pooling, and a linear head. Deliberate simplifications (documented and
mirrored by the reference fixtures): no relative position bias, token grids
must divide evenly by the window size (padding is rejected), and a block's
cyclic shift degenerates to 0 when the grid equals the window.

All functions are pure over immutable inputs; a parameter dict may be shared
read-only across threads.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, asdict

import numpy as np

from .tensor import Tensor, TensorArchive, ShapeError, gelu, layernorm, matmul, softmax

MASK_NEG = -1e9

ParameterSet = dict[str, np.ndarray]


@dataclass(frozen=True)
class ModelConfig:
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
        if self.image_size % self.patch_size != 0:
            raise ValueError("image_size must be divisible by patch_size")
        if len(self.depths) != len(self.num_heads):
            raise ValueError("depths and num_heads must have equal length")
        if any(d < 2 or d % 2 != 0 for d in self.depths):
            raise ValueError("stage depths must be positive even block counts")
        if self.num_classes < 2:
            raise ValueError("need at least two classes")
        if self.mlp_ratio < 1:
            raise ValueError("mlp_ratio must be >= 1")
        for i in range(self.num_stages):
            grid = self.stage_grid(i)
            if grid < self.window_size or grid % self.window_size != 0:
                raise ValueError(
                    f"stage {i} token grid {grid} not divisible by window {self.window_size}; "
                    "padding is not supported"
                )
            if i < self.num_stages - 1 and grid % 2 != 0:
                raise ValueError(f"stage {i} grid {grid} must be even for patch merging")
            if self.stage_dim(i) % self.num_heads[i] != 0:
                raise ValueError(f"stage {i} channels not divisible by num_heads")

    @property
    def num_stages(self) -> int:
        return len(self.depths)

    def stage_dim(self, i: int) -> int:
        return self.embed_dim * (1 << i)

    def stage_grid(self, i: int) -> int:
        return self.image_size // self.patch_size // (1 << i)

    @property
    def final_dim(self) -> int:
        # a stage-less config (embed -> pool -> head) keeps the embed width
        return self.stage_dim(max(self.num_stages - 1, 0))

    def block_shift(self, stage: int, block: int) -> int:
        """Shift for block `block` of `stage`: 0 for even blocks, w//2 for odd
        ones, degenerating to 0 when the grid is a single window."""
        if block % 2 == 0:
            return 0
        if self.stage_grid(stage) == self.window_size:
            return 0
        return self.window_size // 2

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        return cls(**json.loads(text))


PRESETS: dict[str, ModelConfig] = {
    # gradient-check scale: ~1.6k parameters, sub-millisecond forward
    "tiny": ModelConfig(
        image_size=16, patch_size=4, in_channels=3, embed_dim=8,
        depths=(2,), num_heads=(2,), window_size=2, mlp_ratio=2, num_classes=4,
    ),
    # end-to-end scale: ~136k parameters, still fast enough to train on a CPU
    "small": ModelConfig(
        image_size=32, patch_size=4, in_channels=3, embed_dim=32,
        depths=(2, 2), num_heads=(2, 4), window_size=4, mlp_ratio=4, num_classes=4,
    ),
    # the deployed configuration; 27.50M parameters with the 5-class head
    "swin_t": ModelConfig(
        image_size=224, patch_size=4, in_channels=3, embed_dim=96,
        depths=(2, 2, 6, 2), num_heads=(3, 6, 12, 24), window_size=7, mlp_ratio=4,
        num_classes=5,
    ),
}


# ---------------------------------------------------------------------------
# parameter bookkeeping


def param_spec(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Canonical name -> shape map; the single source of parameter layout."""
    spec: dict[str, tuple[int, ...]] = {}
    patch_in = cfg.patch_size * cfg.patch_size * cfg.in_channels
    spec["patch_embed.weight"] = (patch_in, cfg.embed_dim)
    spec["patch_embed.bias"] = (cfg.embed_dim,)
    for i in range(cfg.num_stages):
        c = cfg.stage_dim(i)
        hidden = cfg.mlp_ratio * c
        for j in range(cfg.depths[i]):
            p = f"stage{i}.block{j}"
            spec[f"{p}.ln1.weight"] = (c,)
            spec[f"{p}.ln1.bias"] = (c,)
            spec[f"{p}.qkv.weight"] = (c, 3 * c)
            spec[f"{p}.qkv.bias"] = (3 * c,)
            spec[f"{p}.proj.weight"] = (c, c)
            spec[f"{p}.proj.bias"] = (c,)
            spec[f"{p}.ln2.weight"] = (c,)
            spec[f"{p}.ln2.bias"] = (c,)
            spec[f"{p}.mlp1.weight"] = (c, hidden)
            spec[f"{p}.mlp1.bias"] = (hidden,)
            spec[f"{p}.mlp2.weight"] = (hidden, c)
            spec[f"{p}.mlp2.bias"] = (c,)
        if i < cfg.num_stages - 1:
            spec[f"stage{i}.merge.norm.weight"] = (4 * c,)
            spec[f"stage{i}.merge.norm.bias"] = (4 * c,)
            spec[f"stage{i}.merge.reduce.weight"] = (4 * c, 2 * c)
    spec["final_norm.gamma"] = (cfg.final_dim,)
    spec["final_norm.beta"] = (cfg.final_dim,)
    spec["head.weight"] = (cfg.final_dim, cfg.num_classes)
    spec["head.bias"] = (cfg.num_classes,)
    return spec


def param_count(cfg: ModelConfig) -> int:
    """Exact scalar parameter count, computed arithmetically (the enumerated
    ParameterSet is the independent cross-check)."""
    p = cfg.patch_size
    total = (p * p * cfg.in_channels) * cfg.embed_dim + cfg.embed_dim
    for i in range(cfg.num_stages):
        c = cfg.stage_dim(i)
        h = cfg.mlp_ratio * c
        per_block = (
            2 * c                      # ln1
            + c * 3 * c + 3 * c        # qkv
            + c * c + c                # proj
            + 2 * c                    # ln2
            + c * h + h                # mlp1
            + h * c + c                # mlp2
        )
        total += cfg.depths[i] * per_block
        if i < cfg.num_stages - 1:
            total += 2 * 4 * c + (4 * c) * (2 * c)  # merge norm + reduce
    total += 2 * cfg.final_dim
    total += cfg.final_dim * cfg.num_classes + cfg.num_classes
    return total


def truncated_normal(shape, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """Normal(0, sigma) truncated to +-2 sigma by vectorized rejection."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while np.any(bad):
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return (out * sigma).astype(np.float32)


def init_params(cfg: ModelConfig, seed: int) -> ParameterSet:
    """Seeded initialization: truncated normal (+-2 sigma, sigma=0.02) for
    projections, zeros for biases, ones/zeros for norm affine parameters."""
    rng = np.random.default_rng(seed)
    params: ParameterSet = {}
    for name, shape in param_spec(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf in ("bias", "beta"):
            params[name] = np.zeros(shape, dtype=np.float32)
        elif leaf == "gamma" or (leaf == "weight" and (".ln" in name or ".norm." in name)):
            params[name] = np.ones(shape, dtype=np.float32)
        else:
            params[name] = truncated_normal(shape, 0.02, rng)
    return params


def validate_params(cfg: ModelConfig, params: ParameterSet) -> None:
    spec = param_spec(cfg)
    missing = sorted(set(spec) - set(params))
    extra = sorted(set(params) - set(spec))
    if missing or extra:
        raise ValueError(f"parameter set mismatch: missing={missing}, extra={extra}")
    for name, shape in spec.items():
        if tuple(params[name].shape) != shape:
            raise ValueError(f"{name}: expected shape {shape}, got {params[name].shape}")
        if not np.all(np.isfinite(params[name])):
            raise ValueError(f"{name}: non-finite values")


def params_to_archive(params: ParameterSet, spec_order=None) -> TensorArchive:
    archive = TensorArchive()
    names = spec_order if spec_order is not None else params.keys()
    for name in names:
        archive.add(name, Tensor.f32(params[name]))
    return archive


def params_from_archive(archive: TensorArchive) -> ParameterSet:
    return {name: np.asarray(t.data, dtype=np.float32) for name, t in archive.entries}


# ---------------------------------------------------------------------------
# functional pieces


def patch_embed(image: np.ndarray, weight: np.ndarray, bias: np.ndarray, patch: int) -> np.ndarray:
    """Split an [H, W, C] image into non-overlapping patches, flatten each in
    row-major (y, x, channel) order, and project linearly to the embed dim."""
    h, w, cin = image.shape
    if h % patch != 0 or w % patch != 0:
        raise ShapeError(f"image {h}x{w} not divisible by patch size {patch}")
    g_h, g_w = h // patch, w // patch
    x = image.reshape(g_h, patch, g_w, patch, cin)
    x = x.transpose(0, 2, 1, 3, 4).reshape(g_h * g_w, patch * patch * cin)
    return matmul(x, weight) + bias


def window_partition(x: np.ndarray, window: int) -> np.ndarray:
    """[H, W, C] -> [num_windows, window*window, C], windows in row-major order."""
    h, w, c = x.shape
    if h % window != 0 or w % window != 0:
        raise ShapeError(f"grid {h}x{w} not divisible by window {window}")
    x = x.reshape(h // window, window, w // window, window, c)
    return x.transpose(0, 2, 1, 3, 4).reshape(-1, window * window, c)


def window_reverse(windows: np.ndarray, window: int, h: int, w: int) -> np.ndarray:
    """Inverse of :func:`window_partition`."""
    c = windows.shape[-1]
    x = windows.reshape(h // window, w // window, window, window, c)
    return x.transpose(0, 2, 1, 3, 4).reshape(h, w, c)


def cyclic_shift(x: np.ndarray, shift: int) -> np.ndarray:
    """Torus roll by (-shift, -shift); undo with :func:`cyclic_unshift`."""
    if shift == 0:
        return x
    return np.roll(x, (-shift, -shift), axis=(0, 1))


def cyclic_unshift(x: np.ndarray, shift: int) -> np.ndarray:
    if shift == 0:
        return x
    return np.roll(x, (shift, shift), axis=(0, 1))


def _region_ids(size: int, window: int, shift: int) -> np.ndarray:
    ids = np.zeros(size, dtype=np.int64)
    bounds = (slice(0, size - window), slice(size - window, size - shift), slice(size - shift, size))
    for region, sl in enumerate(bounds):
        ids[sl] = region
    return ids


def build_shift_mask(h: int, w: int, window: int, shift: int) -> np.ndarray:
    """Additive attention bias [num_windows, T, T] with 0 for intra-region
    pairs and MASK_NEG for pairs straddling a pre-shift region boundary."""
    n_win = (h // window) * (w // window)
    t = window * window
    if shift == 0:
        return np.zeros((n_win, t, t), dtype=np.float32)
    canvas = (_region_ids(h, window, shift)[:, None] * 3 + _region_ids(w, window, shift)[None, :])
    win_ids = window_partition(canvas[:, :, None].astype(np.float32), window)[:, :, 0]
    blocked = win_ids[:, :, None] != win_ids[:, None, :]
    return np.where(blocked, np.float32(MASK_NEG), np.float32(0.0))


def window_attention(
    x: np.ndarray,
    qkv_weight: np.ndarray,
    qkv_bias: np.ndarray,
    proj_weight: np.ndarray,
    proj_bias: np.ndarray,
    heads: int,
    mask: np.ndarray | None = None,
) -> np.ndarray:
    """Per-window multi-head scaled dot-product attention.

    x: [num_windows, T, C]; additive mask [num_windows, T, T] is applied to
    the scores before softmax; scale is 1/sqrt(C/heads).
    """
    n_win, t, c = x.shape
    if c % heads != 0:
        raise ShapeError(f"channels {c} not divisible by heads {heads}")
    head_dim = c // heads
    qkv = matmul(x.reshape(n_win * t, c), qkv_weight) + qkv_bias
    qkv = qkv.reshape(n_win, t, 3, heads, head_dim).transpose(2, 0, 3, 1, 4)
    q, k, v = qkv[0], qkv[1], qkv[2]  # [n_win, heads, T, head_dim]
    scale = np.asarray(1.0 / math.sqrt(head_dim), dtype=x.dtype)
    scores = matmul(q, k.swapaxes(-1, -2)) * scale
    if mask is not None:
        scores = scores + mask[:, None, :, :].astype(x.dtype)
    probs = softmax(scores, axis=-1)
    ctx = matmul(probs, v)  # [n_win, heads, T, head_dim]
    ctx = ctx.transpose(0, 2, 1, 3).reshape(n_win * t, c)
    out = matmul(ctx, proj_weight) + proj_bias
    return out.reshape(n_win, t, c)


def swin_block(
    x: np.ndarray,
    params: ParameterSet,
    prefix: str,
    heads: int,
    window: int,
    shift: int,
    mask: np.ndarray | None,
    eps: float = 1e-5,
) -> np.ndarray:
    """One block: LN -> (shifted) windowed attention -> residual -> LN -> MLP
    with GELU -> residual. x is the [H, W, C] token grid."""
    h, w, c = x.shape
    shortcut = x
    y = layernorm(x, params[f"{prefix}.ln1.weight"], params[f"{prefix}.ln1.bias"], eps)
    y = cyclic_shift(y, shift)
    wins = window_partition(y, window)
    wins = window_attention(
        wins,
        params[f"{prefix}.qkv.weight"], params[f"{prefix}.qkv.bias"],
        params[f"{prefix}.proj.weight"], params[f"{prefix}.proj.bias"],
        heads, mask,
    )
    y = window_reverse(wins, window, h, w)
    y = cyclic_unshift(y, shift)
    x = shortcut + y

    shortcut = x
    y = layernorm(x, params[f"{prefix}.ln2.weight"], params[f"{prefix}.ln2.bias"], eps)
    flat = y.reshape(h * w, c)
    hidden = gelu(matmul(flat, params[f"{prefix}.mlp1.weight"]) + params[f"{prefix}.mlp1.bias"])
    out = matmul(hidden, params[f"{prefix}.mlp2.weight"]) + params[f"{prefix}.mlp2.bias"]
    return shortcut + out.reshape(h, w, c)


def swin_block_pair(
    x: np.ndarray, params: ParameterSet, stage: int, first_block: int, cfg: ModelConfig
) -> np.ndarray:
    """Two successive blocks: unshifted, then shifted with the boundary mask."""
    h, w, _ = x.shape
    heads = cfg.num_heads[stage]
    for j in (first_block, first_block + 1):
        shift = cfg.block_shift(stage, j)
        mask = build_shift_mask(h, w, cfg.window_size, shift) if shift else None
        x = swin_block(x, params, f"stage{stage}.block{j}", heads, cfg.window_size, shift, mask)
    return x


def patch_merge(
    x: np.ndarray,
    norm_weight: np.ndarray,
    norm_bias: np.ndarray,
    reduce_weight: np.ndarray,
    eps: float = 1e-5,
) -> np.ndarray:
    """Concatenate each 2x2 token neighborhood (even-even, odd-even, even-odd,
    odd-odd), layer-normalize, and linearly reduce 4C -> 2C."""
    h, w, c = x.shape
    if h % 2 != 0 or w % 2 != 0:
        raise ShapeError(f"grid {h}x{w} must be even for patch merging")
    gathered = np.concatenate(
        [x[0::2, 0::2, :], x[1::2, 0::2, :], x[0::2, 1::2, :], x[1::2, 1::2, :]], axis=-1
    )
    flat = gathered.reshape((h // 2) * (w // 2), 4 * c)
    normed = layernorm(flat, norm_weight, norm_bias, eps)
    reduced = matmul(normed, reduce_weight)
    return reduced.reshape(h // 2, w // 2, 2 * c)


def forward(image: np.ndarray, cfg: ModelConfig, params: ParameterSet) -> np.ndarray:
    """Full classifier: patch embed -> stages of block pairs + patch merges ->
    global average pool -> final layernorm -> linear head. Returns logits."""
    if image.shape != (cfg.image_size, cfg.image_size, cfg.in_channels):
        raise ShapeError(
            f"expected image {(cfg.image_size, cfg.image_size, cfg.in_channels)}, got {image.shape}"
        )
    grid = cfg.stage_grid(0)
    tokens = patch_embed(image, params["patch_embed.weight"], params["patch_embed.bias"], cfg.patch_size)
    x = tokens.reshape(grid, grid, cfg.embed_dim)
    for i in range(cfg.num_stages):
        for j in range(0, cfg.depths[i], 2):
            x = swin_block_pair(x, params, i, j, cfg)
        if i < cfg.num_stages - 1:
            x = patch_merge(
                x,
                params[f"stage{i}.merge.norm.weight"],
                params[f"stage{i}.merge.norm.bias"],
                params[f"stage{i}.merge.reduce.weight"],
            )
    d = cfg.final_dim
    pooled = x.reshape(-1, d).mean(axis=0)
    normed = layernorm(pooled, params["final_norm.gamma"], params["final_norm.beta"])
    return matmul(normed[None, :], params["head.weight"])[0] + params["head.bias"]
