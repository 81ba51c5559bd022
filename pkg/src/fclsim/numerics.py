"""Dense 64-bit tensors with a small reverse-mode tape.

Only the primitives the encoder and the losses need are provided: an affine
map, ReLU and row-wise l2 normalisation.  Loss functions in
:mod:`fclsim.contrastive` register their own primitives through
:meth:`GradTape.record`.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

EPS_NORM = 1e-12
KINK_TOL = 1e-3


class ShapeError(ValueError):
    pass


class DegenerateVectorError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


def _check_finite(arr: np.ndarray, where: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{where}: produced non-finite values")


class Tensor:
    """A float64 array, optionally attached to a :class:`GradTape`."""

    __slots__ = ("data", "tape", "node")

    def __init__(self, data, tape: GradTape | None = None, node: int | None = None):
        arr = np.array(data, dtype=np.float64)
        _check_finite(arr, "Tensor")
        self.data = arr
        self.tape = tape
        self.node = node

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape})"

    def numpy(self) -> np.ndarray:
        return self.data.copy()


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class GradTape:
    """Ordered record of primitive ops for one forward pass.

    Each entry stores the output node, the input nodes and a closure mapping
    the output adjoint to the input adjoints.  ``gradient`` walks the entries
    in exact reverse order.
    """

    def __init__(self):
        self._ops: list[tuple[int, tuple[int | None, ...], Callable]] = []
        self._n_nodes = 0

    def _new_node(self) -> int:
        self._n_nodes += 1
        return self._n_nodes - 1

    def watch(self, x) -> Tensor:
        """Register ``x`` as a differentiable leaf."""
        t = as_tensor(x)
        return Tensor(t.data, tape=self, node=self._new_node())

    def record(self, out: np.ndarray, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
        """Append an op whose ``backward(g_out)`` returns one adjoint per input."""
        _check_finite(out, "op output")
        node = self._new_node()
        in_nodes = tuple(t.node if t.tape is self else None for t in inputs)
        self._ops.append((node, in_nodes, backward))
        result = Tensor.__new__(Tensor)
        result.data = out
        result.tape = self
        result.node = node
        return result

    def __len__(self) -> int:
        return len(self._ops)

    def gradient(self, target: Tensor, sources: Sequence[Tensor]) -> list[np.ndarray]:
        if target.tape is not self or target.data.size != 1:
            raise ValueError("target must be a scalar recorded on this tape")
        adj: dict[int, np.ndarray] = {target.node: np.ones_like(target.data)}
        for node, in_nodes, backward in reversed(self._ops):
            g = adj.pop(node, None)
            if g is None or all(n is None for n in in_nodes):
                continue
            for n, gi in zip(in_nodes, backward(g)):
                if n is None or gi is None:
                    continue
                adj[n] = adj[n] + gi if n in adj else gi
        grads = []
        for s in sources:
            g = adj.get(s.node)
            grads.append(np.zeros_like(s.data) if g is None else g)
        for g in grads:
            _check_finite(g, "gradient")
        return grads


def _tape_of(*tensors: Tensor) -> GradTape | None:
    for t in tensors:
        if isinstance(t, Tensor) and t.tape is not None:
            return t.tape
    return None


def _emit(tape: GradTape | None, out: np.ndarray, inputs, backward) -> Tensor:
    if tape is None:
        _check_finite(out, "op output")
        return Tensor(out)
    return tape.record(out, inputs, backward)


def affine(input, weight, bias) -> Tensor:
    """``input @ weight + bias`` for a vector or a batch of row vectors."""
    x, w, b = as_tensor(input), as_tensor(weight), as_tensor(bias)
    if w.data.ndim != 2 or x.data.ndim not in (1, 2):
        raise ShapeError(f"affine: expected input 1-D/2-D and weight 2-D, got {x.shape} and {w.shape}")
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"affine: input {x.shape} incompatible with weight {w.shape}")
    if b.shape != (w.shape[1],):
        raise ShapeError(f"affine: bias {b.shape} does not match weight columns {w.shape[1]}")
    out = x.data @ w.data + b.data

    def backward(g):
        if x.data.ndim == 1:
            return g @ w.data.T, np.outer(x.data, g), g
        return g @ w.data.T, x.data.T @ g, g.sum(axis=0)

    return _emit(_tape_of(x, w, b), out, (x, w, b), backward)


def relu(input) -> Tensor:
    x = as_tensor(input)
    mask = x.data > 0
    out = np.where(mask, x.data, 0.0)
    return _emit(_tape_of(x), out, (x,), lambda g: (g * mask,))


def l2_normalize(v) -> Tensor:
    """Unit-normalise a vector, or each row of a matrix."""
    x = as_tensor(v)
    norm = np.linalg.norm(x.data, axis=-1, keepdims=True)
    if np.any(norm <= EPS_NORM):
        raise DegenerateVectorError(f"l2_normalize: norm {float(norm.min()):.3g} <= {EPS_NORM}")
    y = x.data / norm

    def backward(g):
        # projection onto the tangent space of the sphere at y
        return ((g - y * np.sum(g * y, axis=-1, keepdims=True)) / norm,)

    return _emit(_tape_of(x), y, (x,), backward)


def grad_check(
    scalar_function: Callable[[Tensor], Tensor],
    point,
    step: float = 1e-5,
    skip: np.ndarray | None = None,
    floor: float = 1e-6,
) -> float:
    """Max relative error between the tape gradient and central differences.

    ``scalar_function`` receives a watched leaf and must return a scalar
    Tensor built from tape ops.  Coordinates flagged in ``skip`` are ignored.
    The relative error per coordinate is ``|a - n| / max(|a|, |n|, floor)``.
    """
    if not 1e-7 <= step <= 1e-3:
        raise ValueError(f"step must be in [1e-7, 1e-3], got {step}")
    x0 = np.array(as_tensor(point).data, dtype=np.float64)
    tape = GradTape()
    leaf = tape.watch(x0)
    out = scalar_function(leaf)
    _check_finite(out.data, "grad_check function value")
    (analytic,) = tape.gradient(out, [leaf])

    def value(x):
        v = scalar_function(Tensor(x)).data
        _check_finite(v, "grad_check function value")
        return float(v.reshape(()))

    flat = x0.reshape(-1)
    skip_flat = None if skip is None else np.asarray(skip, dtype=bool).reshape(-1)
    a_flat = analytic.reshape(-1)
    worst = 0.0
    for i in range(flat.size):
        if skip_flat is not None and skip_flat[i]:
            continue
        xp, xm = flat.copy(), flat.copy()
        xp[i] += step
        xm[i] -= step
        numeric = (value(xp.reshape(x0.shape)) - value(xm.reshape(x0.shape))) / (2 * step)
        err = abs(a_flat[i] - numeric) / max(abs(a_flat[i]), abs(numeric), floor)
        worst = max(worst, err)
    return worst


def squared_norm(v) -> Tensor:
    """``sum(v**2)``; used as the exact-quadratic grad_check sanity case."""
    x = as_tensor(v)
    return _emit(_tape_of(x), np.array(np.sum(x.data**2)), (x,), lambda g: (2.0 * g * x.data,))
