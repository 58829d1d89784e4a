"""Serial ViT and Para-Former networks.

``para-former-<m>-<n>`` is ``n`` independent branches, each a serial stack of
``m`` encoder blocks. All branches read the same embedded tokens and their
outputs are summed in ascending branch order before the shared classifier
head. ``vit-<d>`` is the serial model and is stored as a single branch.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, fields
from typing import Iterator

import numpy as np

from .autodiff import DTYPES, ConfigError, ShapeError, Tensor, backward, cross_entropy, no_grad
from .blocks import (
    DEFAULT_ACTIVATION,
    VARIANTS,
    BlockParams,
    EmbedParams,
    classify_head,
    encoder_block_forward,
    glorot,
    init_block,
    init_embed,
    patch_embed,
)

_NAME_RE = re.compile(r"^\s*(?:para-former-(\d+)-(\d+)|vit-(\d+))\s*$", re.IGNORECASE)


@dataclass(frozen=True)
class ModelSpec:
    topology: str = "parallel"
    depth: int = 1
    branches: int = 1
    dim: int = 64
    heads: int = 4
    ffn_dim: int = 128
    patch: int = 4
    image: tuple[int, int, int] = (3, 32, 32)
    classes: int = 10
    variant: str = "practical"
    activation: str = ""
    aggregation: str = "sum"
    precision: str = "f32"
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "image", tuple(int(v) for v in self.image))
        problems = []
        if self.topology not in ("serial", "parallel"):
            problems.append(f"topology must be serial or parallel, got {self.topology!r}")
        if self.depth < 1:
            problems.append("depth must be >= 1")
        if self.branches < 1:
            problems.append("branches must be >= 1")
        if self.topology == "serial" and self.branches != 1:
            problems.append("serial topology needs branches == 1")
        if self.dim < 1 or self.heads < 1 or self.dim % self.heads:
            problems.append(f"heads ({self.heads}) must divide embed dim ({self.dim})")
        c, h, w = self.image
        if self.patch < 1 or h % self.patch or w % self.patch:
            problems.append(f"patch side {self.patch} must divide image {h}x{w}")
        if self.classes < 2:
            problems.append("classes must be >= 2")
        if self.variant not in VARIANTS:
            problems.append(f"variant must be one of {VARIANTS}")
        if self.activation not in ("", "sigmoid", "gelu"):
            problems.append(f"unknown activation {self.activation!r}")
        if self.aggregation not in ("sum", "mean"):
            problems.append("aggregation must be sum or mean")
        if self.precision not in DTYPES:
            problems.append(f"precision must be one of {sorted(DTYPES)}")
        if problems:
            raise ConfigError("invalid model spec: " + "; ".join(problems))

    @property
    def name(self) -> str:
        if self.topology == "serial":
            return f"vit-{self.depth}"
        return f"para-former-{self.depth}-{self.branches}"

    @property
    def act(self) -> str:
        return self.activation or DEFAULT_ACTIVATION[self.variant]

    @property
    def seq_len(self) -> int:
        _, h, w = self.image
        return (h // self.patch) * (w // self.patch) + 1

    @property
    def patch_dim(self) -> int:
        return self.image[0] * self.patch * self.patch

    @property
    def dtype(self):
        return DTYPES[self.precision]

    @classmethod
    def from_name(cls, name: str, **overrides) -> "ModelSpec":
        m = _NAME_RE.match(name)
        if not m:
            raise ConfigError(f"cannot parse model name {name!r}; expected para-former-<m>-<n> or vit-<d>")
        if m.group(3):
            return cls(topology="serial", depth=int(m.group(3)), branches=1, **overrides)
        return cls(topology="parallel", depth=int(m.group(1)), branches=int(m.group(2)), **overrides)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name == "image":
                v = "x".join(str(i) for i in v)
            lines.append(f"{f.name}={v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ModelSpec":
        kinds = {f.name: f.type for f in fields(cls)}
        values = {}
        for line in text.splitlines():
            line = line.strip()
            if not line:
                continue
            key, _, raw = line.partition("=")
            if key not in kinds:
                raise ConfigError(f"unknown model spec field {key!r}")
            if key == "image":
                values[key] = tuple(int(v) for v in raw.split("x"))
            elif kinds[key] == "int":
                values[key] = int(raw)
            else:
                values[key] = raw
        return cls(**values)


@dataclass
class Model:
    spec: ModelSpec
    embed: EmbedParams
    branches: list[list[BlockParams]]
    head_w: Tensor
    head_b: Tensor

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        for n, t in self.embed.named():
            yield f"embed.{n}", t
        for b, branch in enumerate(self.branches):
            for layer, block in enumerate(branch):
                for n, t in block.named():
                    yield f"branch{b}.block{layer}.{n}", t
        yield "head.w", self.head_w
        yield "head.b", self.head_b

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def state(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self.named_parameters()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for n, t in self.named_parameters():
            t.data = np.array(state[n], dtype=t.dtype, copy=True)


def build(spec: ModelSpec) -> Model:
    """Seeded initialization: embedding, then branches in order, then head."""
    rng = np.random.default_rng(spec.seed)
    dt = spec.dtype
    embed = init_embed(rng, spec.patch_dim, spec.dim, spec.seq_len, dt)
    branches = [[init_block(rng, spec.dim, spec.heads, spec.ffn_dim, spec.variant, dt)
                 for _ in range(spec.depth)] for _ in range(spec.branches)]
    head_w = glorot(rng, spec.dim, spec.classes, (spec.dim, spec.classes), dt)
    head_b = Tensor(np.zeros(spec.classes, dtype=dt), requires_grad=True)
    return Model(spec, embed, branches, head_w, head_b)


def _check_images(model: Model, images: np.ndarray, batched: bool) -> np.ndarray:
    arr = images.data if isinstance(images, Tensor) else np.asarray(images)
    want = model.spec.image
    got = tuple(arr.shape[1:]) if batched else tuple(arr.shape)
    if got != want or (batched and arr.ndim != 4):
        raise ShapeError(f"expected image shape {want}, got {tuple(arr.shape)}")
    return arr


def embed_tokens(model: Model, images) -> Tensor:
    return patch_embed(images, model.embed, model.spec.patch)


def branch_forward(model: Model, tokens: Tensor, b: int) -> Tensor:
    x = tokens
    for block in model.branches[b]:
        x = encoder_block_forward(x, block, model.spec.variant, model.spec.act)
    return x


def aggregate(outputs: list[Tensor], mode: str = "sum") -> Tensor:
    """Sum branch outputs left to right in index order."""
    acc = outputs[0]
    for out in outputs[1:]:
        acc = acc + out
    if mode == "mean" and len(outputs) > 1:
        acc = acc * (1.0 / len(outputs))
    return acc


def head(model: Model, tokens: Tensor) -> Tensor:
    return classify_head(tokens, model.head_w, model.head_b)


def logits_tensor(model: Model, images) -> Tensor:
    """Differentiable logits for ``[C, H, W]`` or ``[B, C, H, W]`` input."""
    tokens = embed_tokens(model, images)
    outs = [branch_forward(model, tokens, b) for b in range(len(model.branches))]
    return head(model, aggregate(outs, model.spec.aggregation))


def forward(model: Model, image) -> np.ndarray:
    arr = _check_images(model, image, batched=False)
    if model.spec.topology == "serial":
        return forward_serial(model, arr)
    with no_grad():
        return logits_tensor(model, arr).data


def forward_serial(model: Model, image) -> np.ndarray:
    """Embed, run the single block stack, classify. No aggregation step."""
    if len(model.branches) != 1:
        raise ConfigError("serial path needs exactly one branch")
    arr = _check_images(model, image, batched=False)
    with no_grad():
        x = embed_tokens(model, arr)
        x = branch_forward(model, x, 0)
        return head(model, x).data


def forward_batch(model: Model, images) -> np.ndarray:
    arr = _check_images(model, images, batched=True)
    return np.stack([forward(model, img) for img in arr]) if len(arr) else np.zeros((0, model.spec.classes))


def block_param_count(block: BlockParams) -> int:
    return sum(t.data.size for _, t in block.named())


def param_count(model: Model) -> dict[str, int]:
    embed = sum(t.data.size for _, t in model.embed.named())
    branches = sum(block_param_count(b) for branch in model.branches for b in branch)
    head_n = model.head_w.data.size + model.head_b.data.size
    return {"embed": embed, "branches": branches, "head": head_n, "total": embed + branches + head_n}


def loss_and_grads(model: Model, images, labels) -> float:
    """Cross-entropy on a batch; gradients land on every parameter."""
    params = model.parameters()
    for p in params:
        p.grad = None
    loss = cross_entropy(logits_tensor(model, images), labels)
    backward(loss, params)
    return float(loss.data)
