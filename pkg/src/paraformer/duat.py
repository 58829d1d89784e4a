"""Explicit matrix-vector forms of strict encoder blocks.

A token matrix ``X`` of shape ``[S, d]`` is flattened by stacking its
columns: ``vec(X)[c * S + r] == X[r, c]``.  Under that ordering
``vec(A X B) == kron(B.T, A) @ vec(X)``, which is the only identity the
lifts below rely on.

Attention is input dependent.  A lifted attention matrix is built from the
softmax pattern evaluated at the given input and is exact only at that
input.

Every multi-layer stack of strict blocks then reduces to::

    x_L = (W1 x_0 + b1) + sum_j W3[j] act(W2[j] x_0 + b2[j])

with one activation term per block; :func:`expand_multi_layer` builds those
parameters by forward recursion over the blocks.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import GELU_A, GELU_C, ConfigError, Tensor, no_grad
from .blocks import BlockParams, attention_weights, encoder_block_forward, mha_forward, ffn_forward

MAX_LIFT_DIM = 512

# Serial dynamic-parameter counts per block depth, as tabulated for 1, 2, 3
# and 6 layers. No closed form reproduces them, so other depths are refused.
SERIAL_DOF = {1: 2, 2: 6, 3: 9, 6: 15}


class CapacityError(ConfigError):
    pass


class UnquantifiedDepthError(ValueError):
    pass


def vec(x: np.ndarray) -> np.ndarray:
    return np.asarray(x).T.reshape(-1).copy()


def unvec(v: np.ndarray, s: int, d: int) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(v).reshape(d, s).T)


def _act(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == "sigmoid":
        return 0.5 * (1.0 + np.tanh(0.5 * z))
    if kind == "gelu":
        return 0.5 * z * (1.0 + np.tanh(GELU_C * (z + GELU_A * z ** 3)))
    raise ConfigError(f"unknown activation {kind!r}")


def _check_capacity(n: int, what: str) -> None:
    if n > MAX_LIFT_DIM:
        raise CapacityError(f"{what} = {n} exceeds the materialization cap of {MAX_LIFT_DIM}")


@dataclass
class LiftedLayer:
    """One strict block as flat matrices.

    ``W1`` is attention plus the identity; ``W2`` is the lifted first FFN
    matrix already multiplied by ``W1``; ``ffn_in`` is the same matrix
    before that product and does not depend on the input.
    """

    W1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    W3: np.ndarray
    b3: np.ndarray
    ffn_in: np.ndarray

    def apply(self, x0: np.ndarray, kind: str = "sigmoid") -> np.ndarray:
        return self.W1 @ x0 + self.b3 + self.W3 @ _act(self.W2 @ x0 + self.b2, kind)


@dataclass
class ExpansionState:
    depth: int
    W1: np.ndarray
    b1: np.ndarray
    W3: list[np.ndarray] = field(default_factory=list)
    W2: list[np.ndarray] = field(default_factory=list)
    b2: list[np.ndarray] = field(default_factory=list)
    layers: list[LiftedLayer] = field(default_factory=list)
    kind: str = "sigmoid"

    @property
    def n_terms(self) -> int:
        return len(self.W3)

    def term(self, j: int, x0: np.ndarray) -> np.ndarray:
        return self.W3[j] @ _act(self.W2[j] @ x0 + self.b2[j], self.kind)

    def evaluate(self, x0: np.ndarray) -> np.ndarray:
        out = self.W1 @ x0 + self.b1
        for j in range(self.n_terms):
            out = out + self.term(j, x0)
        return out


def lift_mha(x, p: BlockParams, include_residual: bool = True) -> np.ndarray:
    """``(S*d) x (S*d)`` matrix ``M`` with ``M @ vec(x) == vec(MHA(x))``.

    Per head, ``A_h x Wv_h Wo_h`` lifts to ``kron((Wv_h Wo_h).T, A_h)``.
    """
    x = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    s, d = x.shape
    _check_capacity(s * d, "S*d")
    att = attention_weights(x, p)
    h, _, dh = p.wq.shape
    out = np.zeros((s * d, s * d))
    for i in range(h):
        value_out = p.wv.data[i] @ p.wo.data[i * dh:(i + 1) * dh]
        out += np.kron(value_out.T, att[i])
    if include_residual:
        out += np.eye(s * d)
    return out


def lift_ffn(p: BlockParams, s: int) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Lifted ``(W2', b2', W3', b3')`` so that ``W3' act(W2' vec(x) + b2') + b3' == vec(FFN(x))``.

    With column stacking, the position-wise products ``x W1`` and ``h W2``
    become ``kron(W1.T, I_S)`` and ``kron(W2.T, I_S)``; a row bias ``b``
    broadcast over S rows becomes ``kron(b, 1_S)``.
    """
    d, dff = p.w1.shape
    _check_capacity(s * d, "S*d")
    _check_capacity(s * dff, "S*d_ff")
    eye = np.eye(s)
    ones = np.ones(s)
    return (np.kron(p.w1.data.T, eye), np.kron(p.b1.data, ones),
            np.kron(p.w2.data.T, eye), np.kron(p.b2.data, ones))


def lift_layer(x, p: BlockParams) -> LiftedLayer:
    x = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    w1 = lift_mha(x, p, include_residual=True)
    f_in, b2, w3, b3 = lift_ffn(p, x.shape[0])
    return LiftedLayer(W1=w1, W2=f_in @ w1, b2=b2, W3=w3, b3=b3, ffn_in=f_in)


def expand_single_layer(x0, p: BlockParams, kind: str = "sigmoid") -> tuple[np.ndarray, LiftedLayer]:
    x0 = x0.data if isinstance(x0, Tensor) else np.asarray(x0, dtype=np.float64)
    layer = lift_layer(x0, p)
    return layer.apply(vec(x0), kind), layer


def expand_multi_layer(x0, layers: list[BlockParams], kind: str = "sigmoid") -> tuple[np.ndarray, ExpansionState]:
    """Flatten a stack of strict blocks into one sum of activation terms.

    Going from depth t to t+1 with block ``(A, G, c2, F3, c3)`` where
    ``G = F2 A``:

    * new term weight ``W2 = G @ W1_acc``;
    * new term bias ``b2 = G b1_acc + c2 + G sum_k W3[k] act(W2[k] x0 + b2[k])``,
      evaluated before the accumulators change;
    * ``W1_acc <- A W1_acc``, ``b1_acc <- A b1_acc + c3``;
    * every earlier ``W3[k] <- A W3[k]``, then ``F3`` is appended.

    The attention pattern of block t+1 is taken at this expansion's own
    depth-t value, not at a separately computed forward pass.
    """
    if not layers:
        raise ConfigError("expand_multi_layer needs at least one block")
    x0 = x0.data if isinstance(x0, Tensor) else np.asarray(x0, dtype=np.float64)
    s, d = x0.shape
    _check_capacity(s * d, "S*d")
    v0 = vec(x0)
    n = s * d
    state = ExpansionState(depth=0, W1=np.eye(n), b1=np.zeros(n), kind=kind)
    xt = v0
    for p in layers:
        layer = lift_layer(unvec(xt, s, d), p)
        g = layer.W2
        lower = np.zeros(n)
        for k in range(state.n_terms):
            lower = lower + state.term(k, v0)
        w2_eff = g @ state.W1
        b2_eff = g @ state.b1 + layer.b2 + g @ lower
        a = layer.W1
        state.W1 = a @ state.W1
        state.b1 = a @ state.b1 + layer.b3
        state.W3 = [a @ w for w in state.W3] + [layer.W3]
        state.W2.append(w2_eff)
        state.b2.append(b2_eff)
        state.layers.append(layer)
        state.depth += 1
        xt = state.evaluate(v0)
    return xt, state


def strict_stack_forward(x0, layers: list[BlockParams], kind: str = "sigmoid") -> list[np.ndarray]:
    """Token matrices after each strict block, computed with the tensor ops."""
    x = x0 if isinstance(x0, Tensor) else Tensor(np.asarray(x0, dtype=np.float64))
    outs = [x.data]
    with no_grad():
        for p in layers:
            x = encoder_block_forward(x, p, "strict", kind)
            outs.append(x.data)
    return outs


def bias_recursion_check(x0, layers: list[BlockParams], state: ExpansionState) -> float:
    """Largest gap between recursive term biases and the direct forward pass.

    For block j the direct pre-activation ``vec((x + MHA(x)) W1 + b1)`` at
    that block's actual input ``x`` is compared with ``W2[j] x0 + b2[j]``.
    """
    x0v = x0.data if isinstance(x0, Tensor) else np.asarray(x0, dtype=np.float64)
    v0 = vec(x0v)
    worst = 0.0
    with no_grad():
        x = Tensor(x0v)
        for j, p in enumerate(layers):
            y = x + mha_forward(x, p)
            pre = vec((y.data @ p.w1.data) + p.b1.data)
            worst = max(worst, float(np.max(np.abs(state.W2[j] @ v0 + state.b2[j] - pre))))
            x = encoder_block_forward(x, p, "strict", state.kind)
    return worst


def random_block(rng: np.random.Generator, d: int, heads: int, d_ff: int, scale: float = 0.5) -> BlockParams:
    """Strict block with every entry, biases included, drawn from N(0, scale^2)."""
    dh = d // heads

    def draw(*shape):
        return Tensor(scale * rng.standard_normal(shape))

    return BlockParams(draw(heads, d, dh), draw(heads, d, dh), draw(heads, d, dh), draw(d, d),
                       draw(d, d_ff), draw(d_ff), draw(d_ff, d), draw(d))


def degrees_of_freedom(m: int, layers: int) -> int:
    """Dynamic-parameter count of a depth-``m`` parallel model with ``layers`` blocks in total.

    The model has ``layers // m`` serial branches, each contributing the
    tabulated serial count for depth ``m``.
    """
    if m not in SERIAL_DOF:
        raise UnquantifiedDepthError(
            f"depth {m} not quantified: degrees of freedom are tabulated only for depths {sorted(SERIAL_DOF)}")
    if layers < m or layers % m:
        raise ConfigError(f"{layers} blocks cannot be split into branches of depth {m}")
    return (layers // m) * SERIAL_DOF[m]


def bias_uat_layers(m: int, branches: int) -> tuple[list[int], int]:
    """Activation-layer counts behind each dynamic bias of one branch, and their total over all branches."""
    if m < 1 or branches < 1:
        raise ConfigError("depth and branch count must be positive")
    per_branch = [] if m == 1 else list(range(1, m + 1))
    return per_branch, branches * sum(per_branch)


# -- verification report ---------------------------------------------------
DEFAULT_TOLERANCES = {"lift_mha": 1e-10, "lift_ffn": 1e-10, "expand_1": 1e-9,
                      "expand_2": 1e-8, "expand_3": 1e-7, "bias_recursion": 1e-8}


@dataclass
class VerifyRow:
    construct: str
    dims: str
    max_abs_err: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return bool(self.max_abs_err < self.tolerance)


@dataclass
class VerifyReport:
    rows: list[VerifyRow]

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.rows)

    def failures(self) -> list[VerifyRow]:
        return [r for r in self.rows if not r.passed]

    def to_text(self) -> str:
        lines = [f"{'construct':<16} {'dims':<22} {'max_abs_err':>12} {'tolerance':>10}  result"]
        for r in self.rows:
            lines.append(f"{r.construct:<16} {r.dims:<22} {r.max_abs_err:>12.3e} {r.tolerance:>10.1e}  "
                         f"{'PASS' if r.passed else 'FAIL'}")
        return "\n".join(lines) + "\n"


def _tol(name: str, override: float | None) -> float:
    if override is not None:
        return override
    if name in DEFAULT_TOLERANCES:
        return DEFAULT_TOLERANCES[name]
    # deeper stacks: loosen one decade per block beyond 3
    depth = int(name.split("_")[1])
    return 1e-7 * 10.0 ** (depth - 3)


def run_verification(s: int = 3, d: int = 4, heads: int = 2, d_ff: int | None = None,
                     depths=(1, 2, 3), seeds: int = 20, tolerance: float | None = None,
                     seed: int = 0) -> VerifyReport:
    """Check every lift and expansion against the direct tensor forward pass."""
    d_ff = d_ff or 2 * d
    _check_capacity(s * d, "S*d")
    _check_capacity(s * d_ff, "S*d_ff")
    if d % heads:
        raise ConfigError(f"heads ({heads}) must divide embed dim ({d})")
    dims = f"S={s},d={d},H={heads},dff={d_ff}"
    errs: dict[str, float] = {}

    def note(name, err):
        errs[name] = max(errs.get(name, 0.0), err)

    root = np.random.SeedSequence(seed)
    for child in root.spawn(seeds):
        rng = np.random.default_rng(child)
        x = rng.standard_normal((s, d))
        p = random_block(rng, d, heads, d_ff)
        with no_grad():
            xt = Tensor(x)
            mha = mha_forward(xt, p).data
            ffn = ffn_forward(xt, p, "sigmoid").data
        note("lift_mha", float(np.max(np.abs(lift_mha(x, p, False) @ vec(x) - vec(mha)))))
        w2, b2, w3, b3 = lift_ffn(p, s)
        lifted = w3 @ _act(w2 @ vec(x) + b2, "sigmoid") + b3
        note("lift_ffn", float(np.max(np.abs(lifted - vec(ffn)))))
        for depth in depths:
            blocks = [p] + [random_block(rng, d, heads, d_ff) for _ in range(depth - 1)]
            direct = strict_stack_forward(x, blocks)[-1]
            if depth == 1:
                value, _ = expand_single_layer(x, p)
            else:
                value, state = expand_multi_layer(x, blocks)
                note("bias_recursion", bias_recursion_check(x, blocks, state))
            note(f"expand_{depth}", float(np.max(np.abs(value - vec(direct)))))
    return VerifyReport([VerifyRow(name, dims, err, _tol(name, tolerance)) for name, err in errs.items()])
