"""Minimal dense-tensor kernel with tape-recorded reverse-mode gradients.

Only the primitives needed by the sentence encoders and the two training
losses are implemented. There is no broadcasting beyond what those call
sites use, and no GPU path. Arrays are row-major float32 by default; the
gradient-oracle tests instantiate the same kernel with float64.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "DimensionError",
    "ConfigError",
    "EmptySequenceError",
    "TapeStateError",
    "NonFiniteError",
    "ACTIVATION_KINDS",
    "linear",
    "conv1d_same",
    "activation",
    "maxpool_time",
    "elementwise",
    "subtract",
    "absolute",
    "concat_vec",
    "stack_rows",
    "rownorm",
    "matmul_nt",
    "softmax_cross_entropy",
    "max_hinge_bidirectional",
    "backward",
]


class DimensionError(ValueError):
    """Operand shapes do not agree with the primitive's contract."""


class ConfigError(ValueError):
    """A primitive was asked for an unsupported option (kind, width, ...)."""


class EmptySequenceError(ValueError):
    """A reduction over time received zero columns."""


class TapeStateError(RuntimeError):
    """backward() was called on a tape with no recorded forward pass."""


class NonFiniteError(FloatingPointError):
    """A tensor or primitive output contains NaN or Inf."""


ACTIVATION_KINDS = ("relu", "tanh", "sigmoid")


def _finite(arr: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{op} produced non-finite values")
    return arr


class Tensor:
    """Dense row-major float array; float32 unless built otherwise.

    Values must be finite: NaN/Inf anywhere is an error state, enforced at
    construction and after every primitive.
    """

    __slots__ = ("data",)

    def __init__(self, data, dtype=np.float32):
        arr = np.ascontiguousarray(data, dtype=dtype)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor data contains NaN or Inf")
        self.data = arr

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        # internal: arr already validated by the producing primitive
        t = object.__new__(cls)
        t.data = arr
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def copy(self) -> "Tensor":
        return Tensor._wrap(self.data.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype})"


class _Node:
    __slots__ = ("op", "inputs", "output", "backward_fn", "forward_fn")

    def __init__(self, op, inputs, output, backward_fn, forward_fn):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn
        self.forward_fn = forward_fn


class Tape:
    """Ordered record of primitive applications.

    ``backward`` visits the nodes exactly once in reverse recording order
    and is a pure function of the tape (calling it twice with seeds g and
    2g yields gradients scaled by exactly 2). ``replay`` recomputes every
    node from its recorded inputs and checks bit-equality of the outputs.
    """

    def __init__(self):
        self._nodes: list[_Node] = []

    def __len__(self) -> int:
        return len(self._nodes)

    @property
    def last_output(self) -> Tensor:
        if not self._nodes:
            raise TapeStateError("tape has no recorded operations")
        return self._nodes[-1].output

    def _record(self, op: str, inputs: Sequence[Tensor], output: Tensor,
                backward_fn: Callable, forward_fn: Callable) -> None:
        self._nodes.append(_Node(op, tuple(inputs), output, backward_fn, forward_fn))

    def replay(self) -> bool:
        """Recompute every node forward; True iff all outputs match bit-exactly."""
        for node in self._nodes:
            again = np.asarray(node.forward_fn())
            if again.tobytes() != node.output.data.tobytes():
                return False
        return True


def backward(tape: Tape, seed) -> dict[Tensor, np.ndarray]:
    """Reverse sweep over ``tape`` seeded at its final output.

    Returns one gradient array per leaf tensor (a tensor that was used as
    an input but never produced by a recorded primitive). Gradients for
    frozen inputs such as embedding matrices are computed like any other
    leaf; callers simply discard them.
    """
    if len(tape) == 0:
        raise TapeStateError("backward called before any forward was recorded")
    final = tape.last_output
    seed_arr = seed.data if isinstance(seed, Tensor) else np.asarray(seed, dtype=final.dtype)
    if seed_arr.shape != final.data.shape:
        raise DimensionError(
            f"seed shape {seed_arr.shape} does not match final output shape {final.data.shape}")

    produced = {id(n.output) for n in tape._nodes}
    grads: dict[int, np.ndarray] = {id(final): np.array(seed_arr, dtype=final.dtype, copy=True)}
    leaves: dict[int, Tensor] = {}

    for node in reversed(tape._nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue  # dead branch: output never fed the seeded result
        input_grads = node.backward_fn(g)
        for t, gi in zip(node.inputs, input_grads):
            if gi is None:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
            if key not in produced:
                leaves[key] = t

    return {t: grads[key] for key, t in leaves.items()}


# ---------------------------------------------------------------------------
# forward kernels (pure ndarray -> ndarray, shared by taped and eval paths)
# ---------------------------------------------------------------------------

def _linear_fwd(W, b, X):
    if X.ndim == 1:
        return W @ X + b
    return W @ X + b[:, None]


def _conv1d_fwd(W, b, X):
    pad = (W.shape[2] - 1) // 2
    Xp = np.pad(X, ((0, 0), (pad, pad)))
    win = np.lib.stride_tricks.sliding_window_view(Xp, W.shape[2], axis=1)
    return np.einsum("ocd,ctd->ot", W, win) + b[:, None]


def _activation_fwd(kind, X):
    if kind == "relu":
        return np.maximum(X, 0)
    if kind == "tanh":
        return np.tanh(X)
    # sigmoid, numerically stable both tails
    out = np.empty_like(X)
    pos = X >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-X[pos]))
    ex = np.exp(X[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _softmax_ce_fwd(logits, labels):
    shifted = logits - logits.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1))
    logp = shifted[np.arange(len(labels)), labels] - logz
    return -logp.mean()


def _max_hinge_fwd(S, alpha):
    diag = np.diag(S).copy()
    masked = S.copy()
    np.fill_diagonal(masked, -np.inf)
    row_arg = masked.argmax(axis=1)
    col_arg = masked.argmax(axis=0)
    row_terms = np.maximum(alpha - diag + masked[np.arange(len(diag)), row_arg], 0)
    col_terms = np.maximum(alpha - diag + masked[col_arg, np.arange(len(diag))], 0)
    return row_terms.sum() + col_terms.sum(), row_arg, col_arg, row_terms, col_terms


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def linear(W: Tensor, b: Tensor, X: Tensor, tape: Tape | None = None) -> Tensor:
    """Affine map per column: Y[:, t] = W @ X[:, t] + b.

    X may be a (K, T) matrix or a single (K,) column.
    """
    if W.data.ndim != 2 or b.data.ndim != 1:
        raise DimensionError("linear expects 2-D W and 1-D b")
    if X.data.ndim not in (1, 2) or X.data.shape[0] != W.data.shape[1]:
        raise DimensionError(
            f"linear shapes disagree: W {W.data.shape}, X {X.data.shape}")
    if b.data.shape[0] != W.data.shape[0]:
        raise DimensionError(f"bias length {b.data.shape[0]} != output dim {W.data.shape[0]}")

    Wd, bd, Xd = W.data, b.data, X.data
    out = Tensor._wrap(_finite(_linear_fwd(Wd, bd, Xd), "linear"))
    if tape is not None:
        def back(g):
            if Xd.ndim == 1:
                return np.outer(g, Xd), g, Wd.T @ g
            return g @ Xd.T, g.sum(axis=1), Wd.T @ g
        tape._record("linear", (W, b, X), out, back, lambda: _linear_fwd(Wd, bd, Xd))
    return out


def conv1d_same(W: Tensor, b: Tensor, X: Tensor, tape: Tape | None = None) -> Tensor:
    """1-D convolution over time with zero same-padding.

    W is (C_out, C_in, width) with odd width; X is (C_in, T); output keeps
    length T.
    """
    if W.data.ndim != 3:
        raise DimensionError("conv1d_same expects 3-D weights (C_out, C_in, width)")
    width = W.data.shape[2]
    if width % 2 == 0:
        raise ConfigError(f"convolution width must be odd, got {width}")
    if X.data.ndim != 2 or X.data.shape[0] != W.data.shape[1]:
        raise DimensionError(f"conv shapes disagree: W {W.data.shape}, X {X.data.shape}")
    if b.data.shape != (W.data.shape[0],):
        raise DimensionError(f"bias shape {b.data.shape} != ({W.data.shape[0]},)")

    Wd, bd, Xd = W.data, b.data, X.data
    out = Tensor._wrap(_finite(_conv1d_fwd(Wd, bd, Xd), "conv1d_same"))
    if tape is not None:
        pad = (width - 1) // 2

        def back(g):
            Xp = np.pad(Xd, ((0, 0), (pad, pad)))
            win = np.lib.stride_tricks.sliding_window_view(Xp, width, axis=1)
            dW = np.einsum("ot,ctd->ocd", g, win)
            gp = np.pad(g, ((0, 0), (pad, pad)))
            wing = np.lib.stride_tricks.sliding_window_view(gp, width, axis=1)
            dX = np.einsum("ocd,oud->cu", Wd[:, :, ::-1], wing)
            return dW, g.sum(axis=1), dX

        tape._record("conv1d_same", (W, b, X), out, back, lambda: _conv1d_fwd(Wd, bd, Xd))
    return out


def activation(kind: str, X: Tensor, tape: Tape | None = None) -> Tensor:
    """Elementwise relu / tanh / sigmoid; relu subgradient at 0 is 0."""
    if kind not in ACTIVATION_KINDS:
        raise ConfigError(f"unknown activation kind {kind!r}")
    Xd = X.data
    out = Tensor._wrap(_finite(_activation_fwd(kind, Xd), f"activation[{kind}]"))
    if tape is not None:
        Yd = out.data

        def back(g):
            if kind == "relu":
                return (g * (Xd > 0),)
            if kind == "tanh":
                return (g * (1.0 - Yd * Yd),)
            return (g * Yd * (1.0 - Yd),)

        tape._record(f"activation[{kind}]", (X,), out, back,
                     lambda: _activation_fwd(kind, Xd))
    return out


def maxpool_time(X: Tensor, tape: Tape | None = None) -> tuple[Tensor, np.ndarray]:
    """Row-wise max over time; returns the pooled vector and winner indices.

    Ties go to the lowest time index; backward routes gradient only to the
    recorded winners.
    """
    if X.data.ndim != 2:
        raise DimensionError("maxpool_time expects a 2-D (D, T) input")
    if X.data.shape[1] == 0:
        raise EmptySequenceError("maxpool_time over an empty sequence")
    Xd = X.data
    argmax = Xd.argmax(axis=1)
    rows = np.arange(Xd.shape[0])
    out = Tensor._wrap(_finite(Xd[rows, argmax], "maxpool_time"))
    if tape is not None:
        def back(g):
            dX = np.zeros_like(Xd)
            dX[rows, argmax] = g
            return (dX,)

        tape._record("maxpool_time", (X,), out, back,
                     lambda: Xd[np.arange(Xd.shape[0]), Xd.argmax(axis=1)])
    return out, argmax


def elementwise(kind: str, A: Tensor, B: Tensor, tape: Tape | None = None) -> Tensor:
    """Elementwise mul or add of equal-shape tensors."""
    if kind not in ("mul", "add"):
        raise ConfigError(f"unknown elementwise kind {kind!r}")
    if A.data.shape != B.data.shape:
        raise DimensionError(f"elementwise shapes disagree: {A.data.shape} vs {B.data.shape}")
    Ad, Bd = A.data, B.data
    raw = Ad * Bd if kind == "mul" else Ad + Bd
    out = Tensor._wrap(_finite(raw, f"elementwise[{kind}]"))
    if tape is not None:
        if kind == "mul":
            back = lambda g: (g * Bd, g * Ad)
            fwd = lambda: Ad * Bd
        else:
            back = lambda g: (g, g)
            fwd = lambda: Ad + Bd
        tape._record(f"elementwise[{kind}]", (A, B), out, back, fwd)
    return out


def subtract(A: Tensor, B: Tensor, tape: Tape | None = None) -> Tensor:
    if A.data.shape != B.data.shape:
        raise DimensionError(f"subtract shapes disagree: {A.data.shape} vs {B.data.shape}")
    Ad, Bd = A.data, B.data
    out = Tensor._wrap(_finite(Ad - Bd, "subtract"))
    if tape is not None:
        tape._record("subtract", (A, B), out, lambda g: (g, -g), lambda: Ad - Bd)
    return out


def absolute(X: Tensor, tape: Tape | None = None) -> Tensor:
    """|X| elementwise; subgradient at 0 is 0 (matches the relu choice)."""
    Xd = X.data
    out = Tensor._wrap(_finite(np.abs(Xd), "absolute"))
    if tape is not None:
        tape._record("absolute", (X,), out, lambda g: (g * np.sign(Xd),),
                     lambda: np.abs(Xd))
    return out


def concat_vec(parts: Sequence[Tensor], tape: Tape | None = None) -> Tensor:
    """Concatenate 1-D tensors into one vector."""
    if not parts:
        raise DimensionError("concat_vec of nothing")
    for p in parts:
        if p.data.ndim != 1:
            raise DimensionError("concat_vec expects 1-D parts")
    datas = [p.data for p in parts]
    out = Tensor._wrap(np.concatenate(datas))
    if tape is not None:
        sizes = [d.shape[0] for d in datas]
        offsets = np.cumsum([0] + sizes)

        def back(g):
            return tuple(g[offsets[i]:offsets[i + 1]] for i in range(len(sizes)))

        tape._record("concat_vec", tuple(parts), out, back,
                     lambda: np.concatenate(datas))
    return out


def stack_rows(rows: Sequence[Tensor], tape: Tape | None = None) -> Tensor:
    """Stack equal-length 1-D tensors into a (B, D) matrix."""
    if not rows:
        raise DimensionError("stack_rows of nothing")
    dim = rows[0].data.shape
    for r in rows:
        if r.data.ndim != 1 or r.data.shape != dim:
            raise DimensionError("stack_rows expects equal-length 1-D rows")
    datas = [r.data for r in rows]
    out = Tensor._wrap(np.stack(datas))
    if tape is not None:
        def back(g):
            return tuple(g[i] for i in range(len(datas)))

        tape._record("stack_rows", tuple(rows), out, back, lambda: np.stack(datas))
    return out


def rownorm(X: Tensor, tape: Tape | None = None) -> Tensor:
    """Scale every row of a (B, D) matrix to unit length."""
    if X.data.ndim != 2:
        raise DimensionError("rownorm expects a 2-D input")
    Xd = X.data
    norms = np.linalg.norm(Xd, axis=1, keepdims=True)
    if np.any(norms == 0):
        bad = int(np.nonzero(norms[:, 0] == 0)[0][0])
        raise NonFiniteError(f"rownorm: row {bad} has zero norm")
    out = Tensor._wrap(_finite(Xd / norms, "rownorm"))
    if tape is not None:
        Yd = out.data

        def back(g):
            proj = (g * Yd).sum(axis=1, keepdims=True)
            return ((g - proj * Yd) / norms,)

        tape._record("rownorm", (X,), out, back,
                     lambda: Xd / np.linalg.norm(Xd, axis=1, keepdims=True))
    return out


def matmul_nt(A: Tensor, B: Tensor, tape: Tape | None = None) -> Tensor:
    """A @ B.T for A (N, D) and B (M, D)."""
    if A.data.ndim != 2 or B.data.ndim != 2 or A.data.shape[1] != B.data.shape[1]:
        raise DimensionError(f"matmul_nt shapes disagree: {A.data.shape} vs {B.data.shape}")
    Ad, Bd = A.data, B.data
    out = Tensor._wrap(_finite(Ad @ Bd.T, "matmul_nt"))
    if tape is not None:
        tape._record("matmul_nt", (A, B), out,
                     lambda g: (g @ Bd, g.T @ Ad), lambda: Ad @ Bd.T)
    return out


def softmax_cross_entropy(logits: Tensor, labels, tape: Tape | None = None) -> Tensor:
    """Mean softmax cross-entropy of (B, C) logits against integer labels."""
    if logits.data.ndim != 2:
        raise DimensionError("softmax_cross_entropy expects (B, C) logits")
    lab = np.asarray(labels)
    n, c = logits.data.shape
    if lab.shape != (n,):
        raise DimensionError(f"labels shape {lab.shape} != ({n},)")
    if lab.min() < 0 or lab.max() >= c:
        raise DimensionError(f"label out of range for {c} classes")
    Ld = logits.data
    out = Tensor._wrap(_finite(np.asarray(_softmax_ce_fwd(Ld, lab), dtype=Ld.dtype),
                               "softmax_cross_entropy"))
    if tape is not None:
        def back(g):
            shifted = Ld - Ld.max(axis=1, keepdims=True)
            p = np.exp(shifted)
            p /= p.sum(axis=1, keepdims=True)
            p[np.arange(n), lab] -= 1.0
            return ((g / n) * p,)

        tape._record("softmax_cross_entropy", (logits,), out, back,
                     lambda: np.asarray(_softmax_ce_fwd(Ld, lab), dtype=Ld.dtype))
    return out


def max_hinge_bidirectional(S: Tensor, alpha: float, tape: Tape | None = None) -> Tensor:
    """Sum of bidirectional max-of-hinges over a (B, B) score matrix.

    For each diagonal positive S[i, i], the hardest in-batch negative is
    taken along its row and along its column:
    sum_i [alpha - S_ii + max_{j!=i} S_ij]_+ + [alpha - S_ii + max_{j!=i} S_ji]_+.
    """
    if S.data.ndim != 2 or S.data.shape[0] != S.data.shape[1]:
        raise DimensionError("score matrix must be square")
    if S.data.shape[0] < 2:
        raise DimensionError("need at least 2 pairs for in-batch negatives")
    Sd = S.data
    loss, row_arg, col_arg, row_terms, col_terms = _max_hinge_fwd(Sd, alpha)
    out = Tensor._wrap(_finite(np.asarray(loss, dtype=Sd.dtype), "max_hinge_bidirectional"))
    if tape is not None:
        n = Sd.shape[0]

        def back(g):
            dS = np.zeros_like(Sd)
            idx = np.arange(n)
            row_active = row_terms > 0
            col_active = col_terms > 0
            np.add.at(dS, (idx[row_active], row_arg[row_active]), g)
            np.add.at(dS, (idx[row_active], idx[row_active]), -g)
            np.add.at(dS, (col_arg[col_active], idx[col_active]), g)
            np.add.at(dS, (idx[col_active], idx[col_active]), -g)
            return (dS,)

        tape._record("max_hinge_bidirectional", (S,), out, back,
                     lambda: np.asarray(_max_hinge_fwd(Sd, alpha)[0], dtype=Sd.dtype))
    return out
