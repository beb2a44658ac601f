"""Toy-scale supervised training: loss, exact reverse-mode gradients, Adam.

The backward pass is hand-derived VJP chaining through every layer of the
classifier and is validated against central finite differences of the plain
forward pass. Gradients follow batch-mean semantics. Everything is seeded and
single-threaded, so runs are bit-reproducible at a fixed thread count.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

from . import model
from .model import ModelConfig, ParameterSet
from .tensor import layernorm, matmul, softmax


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3  # toy from-scratch default; 1e-5 is the fine-tune preset
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 15
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ValueError("learning rate must be non-negative")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("Adam betas must lie in [0, 1)")


FINETUNE_LR = 1e-5


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: ParameterSet) -> "AdamState":
        return cls(
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
        )


def cross_entropy(logits: np.ndarray, label: int) -> float:
    """-log softmax(logits)[label], computed via log-sum-exp."""
    logits = np.asarray(logits)
    if not 0 <= label < logits.shape[-1]:
        raise ValueError(f"label {label} out of range for {logits.shape[-1]} classes")
    m = float(logits.max())
    lse = m + math.log(float(np.sum(np.exp(logits - m))))
    return lse - float(logits[label])


def cross_entropy_grad(logits: np.ndarray, label: int) -> np.ndarray:
    """softmax(logits) - onehot(label)."""
    g = softmax(np.asarray(logits))
    g = g.copy()
    g[label] -= np.asarray(1.0, dtype=g.dtype)
    return g


# ---------------------------------------------------------------------------
# forward with caches + hand-derived backward


def _ln_forward(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float = 1e-5):
    # same op sequence as tensor.layernorm so the traced forward stays
    # bit-identical to model.forward
    mean = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    denom = np.sqrt(var + np.asarray(eps, dtype=x.dtype))
    xhat = (x - mean) / denom
    return xhat * gamma + beta, (xhat, 1.0 / denom, gamma)


def _ln_backward(dy: np.ndarray, cache):
    xhat, inv_std, gamma = cache
    dgamma = np.sum(dy * xhat, axis=tuple(range(dy.ndim - 1)))
    dbeta = np.sum(dy, axis=tuple(range(dy.ndim - 1)))
    dxhat = dy * gamma
    dx = inv_std * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )
    return dx, dgamma, dbeta


def _gelu_backward(dy: np.ndarray, x: np.ndarray) -> np.ndarray:
    phi = np.exp(-0.5 * x * x) / np.sqrt(np.asarray(2.0 * math.pi, dtype=x.dtype))
    cdf = 0.5 * (1.0 + erf(x / np.sqrt(np.asarray(2.0, dtype=x.dtype))))
    return dy * (cdf + x * phi)


def _softmax_backward(dy: np.ndarray, probs: np.ndarray) -> np.ndarray:
    return probs * (dy - np.sum(dy * probs, axis=-1, keepdims=True))


class _Tape:
    """Forward pass of cross_entropy(model.forward) recording what backward needs."""

    def __init__(self, cfg: ModelConfig, params: ParameterSet):
        self.cfg = cfg
        self.params = params
        self.blocks: list[dict] = []
        self.merges: list[dict] = []

    def run(self, image: np.ndarray) -> np.ndarray:
        cfg, params = self.cfg, self.params
        p = cfg.patch_size
        g = cfg.stage_grid(0)
        img = image.reshape(g, p, g, p, cfg.in_channels)
        self.embed_in = img.transpose(0, 2, 1, 3, 4).reshape(g * g, p * p * cfg.in_channels)
        tokens = matmul(self.embed_in, params["patch_embed.weight"]) + params["patch_embed.bias"]
        x = tokens.reshape(g, g, cfg.embed_dim)

        for i in range(cfg.num_stages):
            for j in range(cfg.depths[i]):
                x = self._block(x, i, j)
            if i < cfg.num_stages - 1:
                x = self._merge(x, i)

        d = cfg.final_dim
        self.pool_in_shape = x.shape
        pooled = x.reshape(-1, d).mean(axis=0)
        self.final_ln_out, self.final_ln_cache = _ln_forward(
            pooled, params["final_norm.gamma"], params["final_norm.beta"]
        )
        logits = matmul(self.final_ln_out[None, :], params["head.weight"])[0] + params["head.bias"]
        return logits

    def _block(self, x: np.ndarray, stage: int, block: int) -> np.ndarray:
        cfg, params = self.cfg, self.params
        prefix = f"stage{stage}.block{block}"
        h, w, c = x.shape
        heads = cfg.num_heads[stage]
        head_dim = c // heads
        window = cfg.window_size
        shift = cfg.block_shift(stage, block)
        mask = model.build_shift_mask(h, w, window, shift) if shift else None

        cache: dict = {"prefix": prefix, "shape": (h, w, c), "heads": heads,
                       "head_dim": head_dim, "window": window, "shift": shift}

        y, cache["ln1"] = _ln_forward(x, params[f"{prefix}.ln1.weight"], params[f"{prefix}.ln1.bias"])
        y = model.cyclic_shift(y, shift)
        wins = model.window_partition(y, window)
        n_win, t, _ = wins.shape

        attn_in = wins.reshape(n_win * t, c)
        cache["attn_in"] = attn_in
        qkv = matmul(attn_in, params[f"{prefix}.qkv.weight"]) + params[f"{prefix}.qkv.bias"]
        qkv = qkv.reshape(n_win, t, 3, heads, head_dim).transpose(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        cache["q"], cache["k"], cache["v"] = q, k, v
        scale = np.asarray(1.0 / math.sqrt(head_dim), dtype=x.dtype)
        cache["scale"] = scale
        scores = matmul(q, k.swapaxes(-1, -2)) * scale
        if mask is not None:
            scores = scores + mask[:, None, :, :].astype(x.dtype)
        probs = softmax(scores, axis=-1)
        cache["probs"] = probs
        ctx = matmul(probs, v).transpose(0, 2, 1, 3).reshape(n_win * t, c)
        cache["ctx"] = ctx
        attn_out = matmul(ctx, params[f"{prefix}.proj.weight"]) + params[f"{prefix}.proj.bias"]
        y = model.window_reverse(attn_out.reshape(n_win, t, c), window, h, w)
        y = model.cyclic_unshift(y, shift)
        x = x + y

        y2, cache["ln2"] = _ln_forward(x, params[f"{prefix}.ln2.weight"], params[f"{prefix}.ln2.bias"])
        mlp_in = y2.reshape(h * w, c)
        cache["mlp_in"] = mlp_in
        pre_act = matmul(mlp_in, params[f"{prefix}.mlp1.weight"]) + params[f"{prefix}.mlp1.bias"]
        cache["pre_act"] = pre_act
        act = pre_act * 0.5 * (1.0 + erf(pre_act / np.sqrt(np.asarray(2.0, dtype=x.dtype))))
        cache["act"] = act
        out = matmul(act, params[f"{prefix}.mlp2.weight"]) + params[f"{prefix}.mlp2.bias"]
        x = x + out.reshape(h, w, c)
        self.blocks.append(cache)
        return x

    def _merge(self, x: np.ndarray, stage: int) -> np.ndarray:
        params = self.params
        h, w, c = x.shape
        gathered = np.concatenate(
            [x[0::2, 0::2, :], x[1::2, 0::2, :], x[0::2, 1::2, :], x[1::2, 1::2, :]], axis=-1
        )
        flat = gathered.reshape((h // 2) * (w // 2), 4 * c)
        normed, ln_cache = _ln_forward(
            flat, params[f"stage{stage}.merge.norm.weight"], params[f"stage{stage}.merge.norm.bias"]
        )
        reduced = matmul(normed, params[f"stage{stage}.merge.reduce.weight"])
        self.merges.append({"stage": stage, "shape": (h, w, c), "ln": ln_cache, "normed": normed})
        return reduced.reshape(h // 2, w // 2, 2 * c)


def _linear_vjp(dy: np.ndarray, x: np.ndarray, weight: np.ndarray, grads: ParameterSet, name: str, bias: bool = True):
    grads[f"{name}.weight"] = grads.get(f"{name}.weight", 0) + matmul(x.T, dy)
    if bias:
        grads[f"{name}.bias"] = grads.get(f"{name}.bias", 0) + dy.sum(axis=0)
    return matmul(dy, weight.T)


def backward(
    image: np.ndarray, label: int, cfg: ModelConfig, params: ParameterSet
) -> tuple[float, np.ndarray, ParameterSet]:
    """Loss, logits, and exact gradients of cross_entropy(forward(image)) for
    every parameter."""
    tape = _Tape(cfg, params)
    logits = tape.run(image)
    loss = cross_entropy(logits, label)
    grads: ParameterSet = {}

    dlogits = cross_entropy_grad(logits, label)
    d = cfg.final_dim
    dnormed = _linear_vjp(dlogits[None, :], tape.final_ln_out[None, :], params["head.weight"], grads, "head")[0]
    dpooled, dgamma, dbeta = _ln_backward(dnormed, tape.final_ln_cache)
    grads["final_norm.gamma"] = dgamma
    grads["final_norm.beta"] = dbeta
    n_tokens = tape.pool_in_shape[0] * tape.pool_in_shape[1]
    dx = np.broadcast_to(dpooled / np.asarray(n_tokens, dtype=dpooled.dtype), (n_tokens, d))
    dx = dx.reshape(tape.pool_in_shape)

    merge_iter = list(tape.merges)
    block_iter = list(tape.blocks)
    for i in reversed(range(cfg.num_stages)):
        if i < cfg.num_stages - 1:
            dx = _merge_backward(dx, merge_iter.pop(), params, grads)
        for _ in range(cfg.depths[i]):
            dx = _block_backward(dx, block_iter.pop(), params, grads)

    g = cfg.stage_grid(0)
    dtokens = dx.reshape(g * g, cfg.embed_dim)
    _linear_vjp(dtokens, tape.embed_in, params["patch_embed.weight"], grads, "patch_embed")

    return loss, logits, grads


def _merge_backward(dx: np.ndarray, cache: dict, params: ParameterSet, grads: ParameterSet) -> np.ndarray:
    stage = cache["stage"]
    h, w, c = cache["shape"]
    dreduced = dx.reshape((h // 2) * (w // 2), 2 * c)
    name = f"stage{stage}.merge.reduce"
    grads[f"{name}.weight"] = grads.get(f"{name}.weight", 0) + matmul(cache["normed"].T, dreduced)
    dnormed = matmul(dreduced, params[f"{name}.weight"].T)
    dflat, dgamma, dbeta = _ln_backward(dnormed, cache["ln"])
    grads[f"stage{stage}.merge.norm.weight"] = grads.get(f"stage{stage}.merge.norm.weight", 0) + dgamma
    grads[f"stage{stage}.merge.norm.bias"] = grads.get(f"stage{stage}.merge.norm.bias", 0) + dbeta
    dgathered = dflat.reshape(h // 2, w // 2, 4 * c)
    dout = np.zeros((h, w, c), dtype=dx.dtype)
    dout[0::2, 0::2, :] = dgathered[:, :, 0 * c : 1 * c]
    dout[1::2, 0::2, :] = dgathered[:, :, 1 * c : 2 * c]
    dout[0::2, 1::2, :] = dgathered[:, :, 2 * c : 3 * c]
    dout[1::2, 1::2, :] = dgathered[:, :, 3 * c : 4 * c]
    return dout


def _block_backward(dx: np.ndarray, cache: dict, params: ParameterSet, grads: ParameterSet) -> np.ndarray:
    prefix = cache["prefix"]
    h, w, c = cache["shape"]
    heads, head_dim = cache["heads"], cache["head_dim"]
    window, shift = cache["window"], cache["shift"]

    # MLP branch
    dout = dx.reshape(h * w, c)
    dact = _linear_vjp(dout, cache["act"], params[f"{prefix}.mlp2.weight"], grads, f"{prefix}.mlp2")
    dpre = _gelu_backward(dact, cache["pre_act"])
    dmlp_in = _linear_vjp(dpre, cache["mlp_in"], params[f"{prefix}.mlp1.weight"], grads, f"{prefix}.mlp1")
    dy2 = dmlp_in.reshape(h, w, c)
    dres, dgamma, dbeta = _ln_backward(dy2, cache["ln2"])
    grads[f"{prefix}.ln2.weight"] = grads.get(f"{prefix}.ln2.weight", 0) + dgamma
    grads[f"{prefix}.ln2.bias"] = grads.get(f"{prefix}.ln2.bias", 0) + dbeta
    dx = dx + dres

    # attention branch
    dy = model.cyclic_shift(dx, shift)  # adjoint of cyclic_unshift
    dwins_out = model.window_partition(dy, window)
    n_win, t, _ = dwins_out.shape
    dattn_out = dwins_out.reshape(n_win * t, c)
    dctx = _linear_vjp(dattn_out, cache["ctx"], params[f"{prefix}.proj.weight"], grads, f"{prefix}.proj")
    dctx = dctx.reshape(n_win, t, heads, head_dim).transpose(0, 2, 1, 3)

    probs, q, k, v = cache["probs"], cache["q"], cache["k"], cache["v"]
    dprobs = matmul(dctx, v.swapaxes(-1, -2))
    dv = matmul(probs.swapaxes(-1, -2), dctx)
    dscores = _softmax_backward(dprobs, probs) * cache["scale"]
    dq = matmul(dscores, k)
    dk = matmul(dscores.swapaxes(-1, -2), q)

    dqkv = np.stack([dq, dk, dv], axis=0)  # [3, n_win, heads, T, head_dim]
    dqkv = dqkv.transpose(1, 3, 0, 2, 4).reshape(n_win * t, 3 * c)
    dattn_in = _linear_vjp(dqkv, cache["attn_in"], params[f"{prefix}.qkv.weight"], grads, f"{prefix}.qkv")

    dy = model.window_reverse(dattn_in.reshape(n_win, t, c), window, h, w)
    dy = model.cyclic_unshift(dy, shift)  # adjoint of cyclic_shift
    dres, dgamma, dbeta = _ln_backward(dy, cache["ln1"])
    grads[f"{prefix}.ln1.weight"] = grads.get(f"{prefix}.ln1.weight", 0) + dgamma
    grads[f"{prefix}.ln1.bias"] = grads.get(f"{prefix}.ln1.bias", 0) + dbeta
    return dx + dres


def batch_gradients(
    batch: list[tuple[np.ndarray, int]], cfg: ModelConfig, params: ParameterSet
) -> tuple[float, ParameterSet]:
    """Mean loss and mean gradients over a batch (per-example accumulation)."""
    if not batch:
        raise ValueError("empty batch")
    total: ParameterSet = {}
    loss_sum = 0.0
    for image, label in batch:
        loss, _, grads = backward(image, label, cfg, params)
        loss_sum += loss
        for name, g in grads.items():
            total[name] = total.get(name, 0) + g
    n = np.float32(len(batch))
    mean = {name: (g / n).astype(np.float32) for name, g in total.items()}
    for name in params:
        if name not in mean:
            mean[name] = np.zeros_like(params[name])
    return loss_sum / len(batch), mean


def adam_step(
    params: ParameterSet, grads: ParameterSet, state: AdamState, cfg: TrainConfig
) -> tuple[ParameterSet, AdamState]:
    """Standard bias-corrected Adam update; returns new params and state."""
    t = state.t + 1
    new_params: ParameterSet = {}
    new_m, new_v = {}, {}
    bc1 = 1.0 - cfg.beta1**t
    bc2 = 1.0 - cfg.beta2**t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != parameter shape {p.shape}")
        m = cfg.beta1 * state.m[name] + (1.0 - cfg.beta1) * g
        v = cfg.beta2 * state.v[name] + (1.0 - cfg.beta2) * (g * g)
        m_hat = m / bc1
        v_hat = v / bc2
        new_params[name] = (p - cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.eps)).astype(np.float32)
        new_m[name], new_v[name] = m.astype(np.float32), v.astype(np.float32)
    return new_params, AdamState(m=new_m, v=new_v, t=t)


@dataclass
class EpochMetrics:
    epoch: int
    train_loss: float
    val_accuracy: float


def accuracy_on(dataset: list[tuple[np.ndarray, int]], cfg: ModelConfig, params: ParameterSet) -> float:
    correct = 0
    for image, label in dataset:
        logits = model.forward(image, cfg, params)
        correct += int(np.argmax(logits)) == label
    return correct / len(dataset)


def train_loop(
    train_set: list[tuple[np.ndarray, int]],
    val_set: list[tuple[np.ndarray, int]],
    cfg: ModelConfig,
    tcfg: TrainConfig,
    initial: ParameterSet | None = None,
) -> tuple[ParameterSet, list[EpochMetrics]]:
    """Fixed-epoch training with best-validation-accuracy checkpointing.

    Deterministic for a fixed seed: initialization, per-epoch shuffling, and
    every update are driven by the seeded generator. Ties on validation
    accuracy keep the earliest epoch's parameters.
    """
    if not train_set or not val_set:
        raise ValueError("train and validation splits must be non-empty")
    rng = np.random.default_rng(tcfg.seed)
    params = initial if initial is not None else model.init_params(cfg, tcfg.seed)
    state = AdamState.zeros_like(params)
    best_params = {k: p.copy() for k, p in params.items()}
    best_acc = -1.0
    history: list[EpochMetrics] = []
    for epoch in range(tcfg.epochs):
        order = rng.permutation(len(train_set))
        losses = []
        for start in range(0, len(order), tcfg.batch_size):
            batch = [train_set[i] for i in order[start : start + tcfg.batch_size]]
            loss, grads = batch_gradients(batch, cfg, params)
            params, state = adam_step(params, grads, state, tcfg)
            losses.append(loss)
        val_acc = accuracy_on(val_set, cfg, params)
        history.append(EpochMetrics(epoch=epoch, train_loss=float(np.mean(losses)), val_accuracy=val_acc))
        if val_acc > best_acc:
            best_acc = val_acc
            best_params = {k: p.copy() for k, p in params.items()}
    return best_params, history
