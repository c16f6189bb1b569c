"""A small tape-based reverse-mode differentiation engine over numpy arrays.

Ops are methods on :class:`Graph`. Each call computes its forward value
eagerly and, when any input requires a gradient, appends a node holding the
parents and a closure mapping the output gradient to parent gradients.
:meth:`Graph.backward` walks the nodes in exact reverse append order.

Non-smooth ops (relu, clamp, min/max variants) also log the branch they took.
:func:`finite_difference_check` uses that log to skip coordinates whose
perturbation flips a branch, i.e. coordinates sitting within one step of a
kink where a central difference is meaningless.

Gradient conventions at kinks:

* ``relu`` has derivative 0 at 0.
* ``clamp(x, lo, hi)`` sends the gradient to ``x`` whenever
  ``lo <= x <= hi`` (the boundary counts as interior).
* ``elementwise_min``/``elementwise_max`` send ties to the first argument;
  ``reduce_min``/``reduce_max`` send ties to the lowest index.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .errors import InvalidArgumentError, NumericFaultError


class Tensor:
    """A value plus bookkeeping. Leaves are created directly; op results by a Graph."""

    __slots__ = ("value", "requires_grad", "name", "from_graph")

    def __init__(self, value, requires_grad=False, name=None):
        self.value = np.asarray(value)
        self.requires_grad = requires_grad
        self.name = name
        self.from_graph = False

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def dtype(self):
        return self.value.dtype

    def item(self):
        return self.value.item()

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"


@dataclass
class Node:
    op: str
    out: Tensor
    parents: tuple
    backward: Callable


# Negative control for the gradient checker; see ``broken_gradients``.
_BREAK_GRADIENTS = False


@contextlib.contextmanager
def broken_gradients():
    """Deliberately corrupt the tanh derivative while active."""
    global _BREAK_GRADIENTS
    prev = _BREAK_GRADIENTS
    _BREAK_GRADIENTS = True
    try:
        yield
    finally:
        _BREAK_GRADIENTS = prev


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _swap_last(x):
    return np.swapaxes(x, -1, -2)


class Graph:
    """Append-only record of operations for one forward/backward pass."""

    def __init__(self, check_finite=True):
        self.nodes: list[Node] = []
        self.branches: list[tuple[str, bytes]] = []
        self.check_finite = check_finite

    # -- plumbing -----------------------------------------------------------

    def _wrap(self, x, like=None):
        if isinstance(x, Tensor):
            return x
        arr = np.asarray(x)
        if like is not None and arr.dtype.kind in "fiub" and like.dtype.kind == "f":
            arr = arr.astype(like.dtype, copy=False)
        return Tensor(arr)

    def _record(self, op, value, parents, backward):
        if self.check_finite and value.dtype.kind == "f" and not np.all(np.isfinite(value)):
            raise NumericFaultError(op)
        out = Tensor(value)
        out.from_graph = True
        out.requires_grad = any(p.requires_grad for p in parents)
        if out.requires_grad:
            self.nodes.append(Node(op, out, tuple(parents), backward))
        return out

    def _branch(self, op, *masks):
        self.branches.append((op, b"".join(np.ascontiguousarray(m).tobytes() for m in masks)))

    def signature(self):
        """Every branch decision taken so far, in order."""
        return tuple(self.branches)

    def backward(self, loss: Tensor, wrt=None):
        """Gradients of scalar ``loss`` for leaf tensors.

        Returns a dict keyed by leaf Tensor. With ``wrt`` given, every listed
        tensor appears (zeros when the loss does not depend on it).
        """
        if loss.value.size != 1:
            raise InvalidArgumentError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads = {id(loss): np.ones_like(loss.value)}
        leaves = {}
        if loss.requires_grad and not loss.from_graph:
            leaves[id(loss)] = loss
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            for parent, pg in zip(node.parents, node.backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
                if not parent.from_graph:
                    leaves[key] = parent
        result = {}
        for key, t in leaves.items():
            g = grads[key]
            if self.check_finite and not np.all(np.isfinite(g)):
                raise NumericFaultError("backward", f"gradient of {t.name or 'leaf'}")
            result[t] = g.astype(t.dtype, copy=False)
        if wrt is not None:
            targets = wrt.values() if isinstance(wrt, Mapping) else wrt
            for t in targets:
                if t not in result:
                    result[t] = np.zeros_like(t.value)
        return result

    # -- linear algebra and arithmetic --------------------------------------

    def matmul(self, a, b):
        a, b = self._wrap(a), self._wrap(b)
        if a.ndim == 0 or b.ndim == 0:
            raise InvalidArgumentError("matmul needs at least 1-D operands")
        av = a.value[None, :] if a.ndim == 1 else a.value
        bv = b.value[:, None] if b.ndim == 1 else b.value
        if av.shape[-1] != bv.shape[-2]:
            raise InvalidArgumentError(f"matmul shape mismatch {a.shape} @ {b.shape}")
        full = np.matmul(av, bv)
        value = full
        if a.ndim == 1:
            value = value[..., 0, :]
        if b.ndim == 1:
            value = value[..., 0]

        def backward(g):
            gf = g
            if b.ndim == 1:
                gf = gf[..., None]
            if a.ndim == 1:
                gf = gf[..., None, :]
            ga = _unbroadcast(np.matmul(gf, _swap_last(bv)), av.shape).reshape(a.shape)
            gb = _unbroadcast(np.matmul(_swap_last(av), gf), bv.shape).reshape(b.shape)
            return ga, gb

        return self._record("matmul", value, (a, b), backward)

    def _binary(self, op, a, b, fn, da, db):
        a = self._wrap(a, like=b.value if isinstance(b, Tensor) else None)
        b = self._wrap(b, like=a.value)
        try:
            value = fn(a.value, b.value)
        except ValueError as exc:
            raise InvalidArgumentError(f"{op}: {exc}") from None

        def backward(g):
            return (
                _unbroadcast(da(g, a.value, b.value), a.shape),
                _unbroadcast(db(g, a.value, b.value), b.shape),
            )

        return self._record(op, value, (a, b), backward)

    def add(self, a, b):
        return self._binary("add", a, b, np.add, lambda g, x, y: g, lambda g, x, y: g)

    def sub(self, a, b):
        return self._binary("sub", a, b, np.subtract, lambda g, x, y: g, lambda g, x, y: -g)

    def mul(self, a, b):
        return self._binary("mul", a, b, np.multiply, lambda g, x, y: g * y, lambda g, x, y: g * x)

    def scale(self, a, c: float):
        a = self._wrap(a)
        c = float(c)
        return self._record("scale", a.value * c, (a,), lambda g: (g * c,))

    # -- shape manipulation -------------------------------------------------

    def concat(self, tensors, axis=-1):
        tensors = [self._wrap(t) for t in tensors]
        try:
            value = np.concatenate([t.value for t in tensors], axis=axis)
        except ValueError as exc:
            raise InvalidArgumentError(f"concat: {exc}") from None
        bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

        def backward(g):
            return tuple(np.split(g, bounds, axis=axis))

        return self._record("concat", value, tensors, backward)

    def stack(self, tensors, axis=0):
        tensors = [self._wrap(t) for t in tensors]
        try:
            value = np.stack([t.value for t in tensors], axis=axis)
        except ValueError as exc:
            raise InvalidArgumentError(f"stack: {exc}") from None

        def backward(g):
            return tuple(np.moveaxis(g, axis, 0))

        return self._record("stack", value, tensors, backward)

    def slice(self, a, index):
        """Basic (non-fancy) indexing: ints, slices, Ellipsis."""
        a = self._wrap(a)
        value = a.value[index]

        def backward(g):
            full = np.zeros_like(a.value)
            full[index] = g
            return (full,)

        return self._record("slice", value, (a,), backward)

    def transpose(self, a, axes=None):
        """Swap the last two axes, or permute by ``axes``."""
        a = self._wrap(a)
        if axes is None:
            if a.ndim < 2:
                raise InvalidArgumentError("transpose needs at least 2 axes")
            value = _swap_last(a.value)
            return self._record("transpose", value, (a,), lambda g: (_swap_last(g),))
        inverse = np.argsort(axes)
        return self._record(
            "transpose", np.transpose(a.value, axes), (a,), lambda g: (np.transpose(g, inverse),)
        )

    def reshape(self, a, shape):
        a = self._wrap(a)
        try:
            value = a.value.reshape(shape)
        except ValueError as exc:
            raise InvalidArgumentError(f"reshape: {exc}") from None
        return self._record("reshape", value, (a,), lambda g: (g.reshape(a.shape),))

    def gather_rows(self, table, ids):
        """Embedding lookup: ``table[ids]``; the gradient is scatter-added."""
        table = self._wrap(table)
        ids = np.asarray(ids)
        if ids.dtype.kind not in "iu":
            raise InvalidArgumentError("gather_rows needs integer ids")
        if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
            raise InvalidArgumentError(
                f"row id out of range [0, {table.shape[0]}): {ids.min()}..{ids.max()}"
            )
        value = table.value[ids]

        def backward(g):
            full = np.zeros_like(table.value)
            np.add.at(full, ids, g)
            return (full,)

        return self._record("gather_rows", value, (table,), backward)

    # -- reductions -----------------------------------------------------------

    def reduce_sum(self, a, axis=None, keepdims=False):
        a = self._wrap(a)
        value = np.sum(a.value, axis=axis, keepdims=keepdims)

        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, a.shape).copy(),)

        return self._record("reduce_sum", value, (a,), backward)

    def reduce_mean(self, a, axis=None, keepdims=False):
        a = self._wrap(a)
        value = np.mean(a.value, axis=axis, keepdims=keepdims)
        count = a.value.size // max(value.size, 1)

        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g / count, a.shape).copy(),)

        return self._record("reduce_mean", value, (a,), backward)

    def _reduce_arg(self, op, a, axis, mask, pick):
        a = self._wrap(a)
        axis = axis % a.ndim
        fill = np.inf if pick is np.argmin else -np.inf
        masked = a.value if mask is None else np.where(mask, a.value, fill)
        if mask is not None and not np.all(np.any(mask, axis=axis)):
            raise InvalidArgumentError(f"{op}: a reduction slice has no valid entries")
        idx = np.expand_dims(pick(masked, axis=axis), axis)
        value = np.take_along_axis(a.value, idx, axis=axis).squeeze(axis)
        self._branch(op, idx)

        def backward(g):
            full = np.zeros_like(a.value)
            np.put_along_axis(full, idx, np.expand_dims(g, axis), axis=axis)
            return (full,)

        return self._record(op, value, (a,), backward)

    def reduce_min(self, a, axis=-1, mask=None):
        """Minimum along ``axis``; the gradient goes to the first argmin.

        ``mask`` (bool, same shape) excludes entries where it is False.
        """
        return self._reduce_arg("reduce_min", a, axis, mask, np.argmin)

    def reduce_max(self, a, axis=-1, mask=None):
        return self._reduce_arg("reduce_max", a, axis, mask, np.argmax)

    # -- piecewise ------------------------------------------------------------

    def elementwise_min(self, a, b):
        a = self._wrap(a, like=b.value if isinstance(b, Tensor) else None)
        b = self._wrap(b, like=a.value)
        take_a = a.value <= b.value
        self._branch("elementwise_min", take_a)
        value = np.where(take_a, a.value, b.value)
        return self._record(
            "elementwise_min",
            value,
            (a, b),
            lambda g: (_unbroadcast(g * take_a, a.shape), _unbroadcast(g * ~take_a, b.shape)),
        )

    def elementwise_max(self, a, b):
        a = self._wrap(a, like=b.value if isinstance(b, Tensor) else None)
        b = self._wrap(b, like=a.value)
        take_a = a.value >= b.value
        self._branch("elementwise_max", take_a)
        value = np.where(take_a, a.value, b.value)
        return self._record(
            "elementwise_max",
            value,
            (a, b),
            lambda g: (_unbroadcast(g * take_a, a.shape), _unbroadcast(g * ~take_a, b.shape)),
        )

    def clamp(self, x, lo, hi):
        """``min(hi, max(lo, x))`` with the gradient routed to ``x`` on the boundary."""
        x = self._wrap(x)
        lo = self._wrap(lo, like=x.value)
        hi = self._wrap(hi, like=x.value)
        below = x.value < lo.value
        above = (x.value > hi.value) & ~below
        inside = ~(below | above)
        self._branch("clamp", below, above)
        value = np.where(below, lo.value, np.where(above, hi.value, x.value))
        value = np.broadcast_to(value, np.broadcast_shapes(x.shape, lo.shape, hi.shape)).copy()

        def backward(g):
            return (
                _unbroadcast(g * inside, x.shape),
                _unbroadcast(g * below, lo.shape),
                _unbroadcast(g * above, hi.shape),
            )

        return self._record("clamp", value, (x, lo, hi), backward)

    def relu(self, a):
        a = self._wrap(a)
        active = a.value > 0
        self._branch("relu", active)
        return self._record("relu", np.where(active, a.value, 0).astype(a.dtype), (a,),
                            lambda g: (g * active,))

    # -- smooth nonlinearities ------------------------------------------------

    def sigmoid(self, a):
        a = self._wrap(a)
        x = a.value
        e = np.exp(-np.abs(x))
        value = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(a.dtype)
        return self._record("sigmoid", value, (a,), lambda g: (g * value * (1 - value),))

    def tanh(self, a):
        a = self._wrap(a)
        value = np.tanh(a.value)

        def backward(g):
            if _BREAK_GRADIENTS:
                return (g * (1 - value),)
            return (g * (1 - value * value),)

        return self._record("tanh", value, (a,), backward)

    def softmax_rows(self, a, mask=None):
        """Softmax over the last axis; entries where ``mask`` is False get probability 0."""
        a = self._wrap(a)
        if a.ndim < 1:
            raise InvalidArgumentError("softmax_rows needs at least one axis")
        logits = a.value
        if mask is not None:
            mask = np.broadcast_to(np.asarray(mask, dtype=bool), a.shape)
            if not np.all(np.any(mask, axis=-1)):
                raise InvalidArgumentError("softmax_rows: a row has no valid entries")
            logits = np.where(mask, logits, -np.inf)
        shifted = logits - np.max(logits, axis=-1, keepdims=True)
        e = np.exp(shifted)
        value = (e / np.sum(e, axis=-1, keepdims=True)).astype(a.dtype)

        def backward(g):
            return (value * (g - np.sum(g * value, axis=-1, keepdims=True)),)

        return self._record("softmax_rows", value, (a,), backward)

    def squared_norm(self, a, axis=-1):
        a = self._wrap(a)
        value = np.sum(a.value * a.value, axis=axis)

        def backward(g):
            return (2 * a.value * np.expand_dims(g, axis),)

        return self._record("squared_norm", value, (a,), backward)

    def dropout_mask(self, a, rate: float, rng: np.random.Generator | None, train: bool):
        """Inverted dropout. Identity outside training or at rate 0."""
        a = self._wrap(a)
        if not train or rate <= 0:
            return a
        if not 0 <= rate < 1:
            raise InvalidArgumentError("dropout rate must lie in [0, 1)")
        if rng is None:
            raise InvalidArgumentError("dropout in training mode needs an explicit generator")
        keep = (rng.random(a.shape) >= rate).astype(a.dtype) / (1 - rate)
        return self._record("dropout_mask", a.value * keep, (a,), lambda g: (g * keep,))


# ---------------------------------------------------------------------------
# Finite-difference oracle


@dataclass
class CoordinateCheck:
    param: str
    index: tuple
    analytic: float
    numeric: float
    rel_error: float
    skipped: bool = False
    passed: bool = True


@dataclass
class GradCheckReport:
    checks: list = field(default_factory=list)
    rtol: float = 1e-3
    atol: float = 1e-6

    @property
    def n_checked(self):
        return sum(not c.skipped for c in self.checks)

    @property
    def n_skipped(self):
        return sum(c.skipped for c in self.checks)

    @property
    def failures(self):
        return [c for c in self.checks if not c.skipped and not c.passed]

    @property
    def max_rel_error(self):
        # coordinates with near-zero gradients only ever have noisy ratios
        errs = [c.rel_error for c in self.checks
                if not c.skipped and max(abs(c.analytic), abs(c.numeric)) > self.atol]
        return max(errs, default=0.0)

    @property
    def passed(self):
        return not self.failures

    def summary(self):
        status = "PASS" if self.passed else "FAIL"
        return (
            f"{status}: {self.n_checked} coordinates checked, {self.n_skipped} skipped at kinks, "
            f"max rel error {self.max_rel_error:.2e}"
        )


def finite_difference_check(
    f: Callable[[Graph], Tensor],
    params: Mapping[str, Tensor],
    step: float = 1e-4,
    rtol: float = 1e-3,
    atol: float = 1e-6,
    max_coords_per_param: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradCheckReport:
    """Compare reverse-mode gradients with central differences.

    ``f`` builds the scalar loss on the graph it is given and must be
    deterministic. Parameter values are perturbed in place and restored.
    A coordinate is skipped when either perturbed evaluation takes a
    different branch at some kink than the unperturbed one. A coordinate
    passes when ``|a - n| <= atol`` or ``|a - n| <= rtol * max(|a|, |n|)``.
    """
    if not step > 0:
        raise InvalidArgumentError("step must be positive")
    graph = Graph()
    loss = f(graph)
    grads = graph.backward(loss, wrt=params)
    base_sig = graph.signature()
    report = GradCheckReport(rtol=rtol, atol=atol)

    def evaluate():
        g = Graph()
        value = float(f(g).value)
        return value, g.signature()

    for name, tensor in params.items():
        flat = tensor.value.reshape(-1)
        if not np.shares_memory(flat, tensor.value):
            raise InvalidArgumentError(f"parameter {name} must be contiguous")
        coords = np.arange(flat.size)
        if max_coords_per_param is not None and flat.size > max_coords_per_param:
            rng = rng or np.random.default_rng(0)
            coords = np.sort(rng.choice(flat.size, max_coords_per_param, replace=False))
        analytic_all = grads[tensor].reshape(-1)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + step
            up, sig_up = evaluate()
            flat[i] = orig - step
            down, sig_down = evaluate()
            flat[i] = orig
            analytic = float(analytic_all[i])
            numeric = (up - down) / (2 * step)
            diff = abs(analytic - numeric)
            scale = max(abs(analytic), abs(numeric))
            rel = diff / scale if scale > 0 else 0.0
            index = np.unravel_index(i, tensor.shape)
            skipped = sig_up != base_sig or sig_down != base_sig
            ok = diff <= atol or diff <= rtol * scale
            report.checks.append(
                CoordinateCheck(name, tuple(int(j) for j in index), analytic, numeric,
                                rel, skipped, ok)
            )
    return report
