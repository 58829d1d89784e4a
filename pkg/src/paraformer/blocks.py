"""Transformer encoder building blocks.

All ops accept token matrices of shape ``[..., S, d]``; any leading axes are
treated as a batch. Two encoder variants exist:

* ``strict``: residuals, no normalization.  ``out = y + FFN(y)`` with
  ``y = x + MHA(x)``.  This is the block that :mod:`paraformer.duat` expands.
* ``practical``: pre-norm.  ``y = x + MHA(LN(x))``, ``out = y + FFN(LN(y))``.

Patch flattening is channel-major, then row-major inside a channel: entry
``c * P * P + i * P + j`` of a patch vector is pixel ``(c, i, j)`` of that
patch. Patches themselves are enumerated row-major over the patch grid.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Iterator

import numpy as np

from .autodiff import (
    ConfigError,
    ShapeError,
    Tensor,
    activation,
    broadcast_to,
    concat,
    layer_norm,
    matmul,
    reshape,
    softmax_rows,
    swapaxes,
)

VARIANTS = ("strict", "practical")
DEFAULT_ACTIVATION = {"strict": "sigmoid", "practical": "gelu"}
LN_EPS = 1e-5


@dataclass
class BlockParams:
    """Parameters of one encoder block.

    ``wq``, ``wk``, ``wv`` are stacked per head as ``[H, d, d_h]``; ``wo`` is
    ``[H * d_h, d]`` and its rows ``h * d_h : (h + 1) * d_h`` belong to head h.
    """

    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    gamma1: Tensor | None = None
    beta1: Tensor | None = None
    gamma2: Tensor | None = None
    beta2: Tensor | None = None

    def __post_init__(self):
        h, d, dh = self.wq.shape
        if h * dh != d:
            raise ConfigError(f"heads ({h}) x head dim ({dh}) must equal embed dim ({d})")
        for name in ("wk", "wv"):
            if getattr(self, name).shape != self.wq.shape:
                raise ConfigError(f"{name} shape {getattr(self, name).shape} != wq shape {self.wq.shape}")
        if self.wo.shape != (d, d):
            raise ConfigError(f"wo must be {(d, d)}, got {self.wo.shape}")

    @property
    def heads(self) -> int:
        return self.wq.shape[0]

    @property
    def dim(self) -> int:
        return self.wq.shape[1]

    @property
    def ffn_dim(self) -> int:
        return self.w1.shape[1]

    def named(self) -> Iterator[tuple[str, Tensor]]:
        for f in fields(self):
            t = getattr(self, f.name)
            if t is not None:
                yield f.name, t


@dataclass
class EmbedParams:
    proj_w: Tensor  # [P*P*C, d]
    proj_b: Tensor  # [d]
    cls: Tensor  # [d]
    pos: Tensor  # [S + 1, d]

    def named(self) -> Iterator[tuple[str, Tensor]]:
        for f in fields(self):
            yield f.name, getattr(self, f.name)


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape, dtype) -> Tensor:
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-a, a, size=shape).astype(dtype), requires_grad=True)


def _zeros(shape, dtype) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


def init_block(rng: np.random.Generator, d: int, heads: int, d_ff: int,
               variant: str = "strict", dtype=np.float64) -> BlockParams:
    if variant not in VARIANTS:
        raise ConfigError(f"unknown block variant {variant!r}")
    if d % heads:
        raise ConfigError(f"heads ({heads}) must divide embed dim ({d})")
    dh = d // heads
    qkv = [glorot(rng, d, dh, (heads, d, dh), dtype) for _ in range(3)]
    p = BlockParams(
        *qkv,
        wo=glorot(rng, d, d, (d, d), dtype),
        w1=glorot(rng, d, d_ff, (d, d_ff), dtype),
        b1=_zeros((d_ff,), dtype),
        w2=glorot(rng, d_ff, d, (d_ff, d), dtype),
        b2=_zeros((d,), dtype),
    )
    if variant == "practical":
        p.gamma1 = Tensor(np.ones(d, dtype=dtype), requires_grad=True)
        p.beta1 = _zeros((d,), dtype)
        p.gamma2 = Tensor(np.ones(d, dtype=dtype), requires_grad=True)
        p.beta2 = _zeros((d,), dtype)
    return p


def init_embed(rng: np.random.Generator, patch_dim: int, d: int, seq_len: int, dtype=np.float64) -> EmbedParams:
    return EmbedParams(
        proj_w=glorot(rng, patch_dim, d, (patch_dim, d), dtype),
        proj_b=_zeros((d,), dtype),
        cls=_zeros((d,), dtype),
        pos=Tensor((0.02 * rng.standard_normal((seq_len, d))).astype(dtype), requires_grad=True),
    )


def mha_forward(x: Tensor, p: BlockParams) -> Tensor:
    """Multi-head self-attention without residual."""
    if x.shape[-1] != p.dim:
        raise ConfigError(f"token dim {x.shape[-1]} does not match block dim {p.dim}")
    lead = x.shape[:-2]
    s = x.shape[-2]
    h, d, dh = p.wq.shape
    xh = reshape(x, lead + (1, s, d))
    q = matmul(xh, p.wq)  # [..., H, S, dh]
    k = matmul(xh, p.wk)
    v = matmul(xh, p.wv)
    scores = matmul(q, swapaxes(k, -1, -2)) * (1.0 / np.sqrt(dh))
    att = softmax_rows(scores)
    heads = matmul(att, v)  # [..., H, S, dh]
    cat = reshape(swapaxes(heads, -3, -2), lead + (s, h * dh))
    return matmul(cat, p.wo)


def attention_weights(x: np.ndarray, p: BlockParams) -> np.ndarray:
    """Per-head attention matrices ``[H, S, S]`` for a single token matrix."""
    dh = p.wq.shape[2]
    q = np.matmul(x[None], p.wq.data)
    k = np.matmul(x[None], p.wk.data)
    z = np.matmul(q, np.swapaxes(k, -1, -2)) / np.sqrt(dh)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def ffn_forward(x: Tensor, p: BlockParams, kind: str = "sigmoid") -> Tensor:
    """Position-wise ``act(x W1 + b1) W2 + b2``."""
    return matmul(activation(matmul(x, p.w1) + p.b1, kind), p.w2) + p.b2


def encoder_block_forward(x: Tensor, p: BlockParams, variant: str = "strict",
                          kind: str | None = None) -> Tensor:
    if variant not in VARIANTS:
        raise ConfigError(f"unknown block variant {variant!r}; expected one of {VARIANTS}")
    kind = kind or DEFAULT_ACTIVATION[variant]
    if variant == "strict":
        y = x + mha_forward(x, p)
        return y + ffn_forward(y, p, kind)
    if p.gamma1 is None:
        raise ConfigError("practical variant needs layer-norm parameters")
    y = x + mha_forward(layer_norm(x, p.gamma1, p.beta1, LN_EPS), p)
    return y + ffn_forward(layer_norm(y, p.gamma2, p.beta2, LN_EPS), p, kind)


def extract_patches(images: np.ndarray, patch: int) -> np.ndarray:
    """``[..., C, H, W]`` -> ``[..., S, C*P*P]``."""
    *lead, c, h, w = images.shape
    if h % patch or w % patch:
        raise ShapeError(f"image {h}x{w} is not divisible by patch side {patch}")
    gh, gw = h // patch, w // patch
    x = images.reshape(*lead, c, gh, patch, gw, patch)
    n = len(lead)
    # -> [..., gh, gw, C, P, P]
    perm = list(range(n)) + [n + 1, n + 3, n, n + 2, n + 4]
    x = x.transpose(perm)
    return np.ascontiguousarray(x.reshape(*lead, gh * gw, c * patch * patch))


def assemble_patches(patches: np.ndarray, channels: int, height: int, width: int, patch: int) -> np.ndarray:
    """Inverse of :func:`extract_patches`."""
    *lead, _, _ = patches.shape
    gh, gw = height // patch, width // patch
    n = len(lead)
    x = patches.reshape(*lead, gh, gw, channels, patch, patch)
    perm = list(range(n)) + [n + 2, n, n + 3, n + 1, n + 4]
    return np.ascontiguousarray(x.transpose(perm).reshape(*lead, channels, height, width))


def patch_embed(images, e: EmbedParams, patch: int) -> Tensor:
    """Patch projection, class token prepend and positional table, ``[..., S+1, d]``."""
    arr = images.data if isinstance(images, Tensor) else np.asarray(images)
    patches = Tensor(extract_patches(arr.astype(e.proj_w.dtype, copy=False), patch))
    s = patches.shape[-2]
    if e.pos.shape[0] != s + 1:
        raise ShapeError(f"positional table has {e.pos.shape[0]} rows, sequence needs {s + 1}")
    tokens = matmul(patches, e.proj_w) + e.proj_b
    lead = tokens.shape[:-2]
    d = tokens.shape[-1]
    cls = reshape(e.cls, (1,) * len(lead) + (1, d))
    if lead:
        cls = broadcast_to(cls, lead + (1, d))
    return concat([cls, tokens], axis=-2) + e.pos


def classify_head(tokens: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Logits from the class-token row: ``tokens[..., 0, :] @ w + b``."""
    lead = tokens.shape[:-2]
    cls_row = tokens[(Ellipsis, slice(0, 1), slice(None))]
    return reshape(matmul(cls_row, w), lead + (w.shape[1],)) + b


def predict(logits: np.ndarray) -> np.ndarray:
    """Argmax over the last axis; ties go to the lowest index."""
    return np.argmax(logits, axis=-1)
