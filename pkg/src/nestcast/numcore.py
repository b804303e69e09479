"""Minimal reverse-mode autodiff over float64 numpy arrays.

Everything downstream (encoders, cross-scale attention, losses) is built from
the small op set in this module. Design constraints, in rough order:

* double precision only, deterministic: identical inputs give bit-identical
  outputs, so trained runs and checkpoints are reproducible;
* exact analytic backward per op, validated against central finite
  differences (see :func:`gradient_check`);
* multiply-add accounting: every matmul-type op adds its product count to a
  global counter, split into an "attention" bucket (the QK^T and PV products
  inside :func:`scaled_dot_attention`) and a "projection" bucket (everything
  else). Elementwise work, softmax exponentials and the 1/sqrt(d) scaling are
  not counted.

Gradients flow only where ``requires_grad`` is set; inputs wrapped by
:func:`as_tensor` are constants. Use :func:`no_grad` to skip tape
construction entirely (inference, finite differences).
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ParamStore",
    "GradCheckReport",
    "as_tensor",
    "add",
    "scale",
    "matmul",
    "linear",
    "relu",
    "reshape",
    "stack0",
    "embedding_mean",
    "scaled_dot_attention",
    "stable_softmax",
    "huber_loss",
    "pinball_loss",
    "sum_all",
    "mean_all",
    "no_grad",
    "grad_enabled",
    "reset_op_counts",
    "op_counts",
    "gradient_check",
]

_grad_enabled = True

# multiply-add counters, forward passes only
_counts = {"attention": 0, "projection": 0}


def reset_op_counts() -> None:
    _counts["attention"] = 0
    _counts["projection"] = 0


def op_counts() -> dict[str, int]:
    """Multiply-adds since the last reset, keyed by bucket."""
    return dict(_counts)


def grad_enabled() -> bool:
    return _grad_enabled


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable tape construction inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A float64 array plus an optional backward closure on the tape."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self) -> None:
        """Reverse pass from a scalar; accumulates into .grad of tape leaves."""
        if self.data.shape != ():
            raise ValueError(f"backward requires a scalar, got shape {self.data.shape}")
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        self.grad = np.ones((), dtype=np.float64)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward()

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}{tag}, requires_grad={self.requires_grad})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _track(out: Tensor, parents: Sequence[Tensor], backward: Callable[[], None]) -> Tensor:
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient back down to the shape it was broadcast from."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data + b.data)

    def backward() -> None:
        g = out.grad
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.data.shape))

    return _track(out, (a, b), backward)


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    out = Tensor(a.data * c)

    def backward() -> None:
        if a.requires_grad:
            a._accumulate(out.grad * c)

    return _track(out, (a,), backward)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ValueError(f"matmul needs 2d+ operands, got {a.data.shape} @ {b.data.shape}")
    out_data = np.matmul(a.data, b.data)
    _counts["projection"] += out_data.size * a.data.shape[-1]
    out = Tensor(out_data)

    def backward() -> None:
        g = out.grad
        if a.requires_grad:
            a._accumulate(_unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.data.shape))

    return _track(out, (a, b), backward)


def linear(x, w, b) -> Tensor:
    """y = x @ w + b for x[..., n_in], w[n_in, n_out], b[n_out]."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if w.data.ndim != 2 or x.data.shape[-1] != w.data.shape[0] or b.data.shape != (w.data.shape[1],):
        raise ValueError(
            f"linear shape mismatch: x{x.data.shape} w{w.data.shape} b{b.data.shape}"
        )
    n_in, n_out = w.data.shape
    out_data = np.matmul(x.data, w.data) + b.data
    _counts["projection"] += (out_data.size // n_out) * n_in * n_out
    out = Tensor(out_data)

    def backward() -> None:
        g = out.grad
        if x.requires_grad:
            x._accumulate(np.matmul(g, w.data.T))
        if w.requires_grad:
            w._accumulate(x.data.reshape(-1, n_in).T @ g.reshape(-1, n_out))
        if b.requires_grad:
            b._accumulate(g.reshape(-1, n_out).sum(axis=0))

    return _track(out, (x, w, b), backward)


def relu(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.maximum(a.data, 0.0))

    def backward() -> None:
        if a.requires_grad:
            a._accumulate(out.grad * (a.data > 0.0))

    return _track(out, (a,), backward)


def reshape(a, shape: tuple[int, ...]) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data.reshape(shape))

    def backward() -> None:
        if a.requires_grad:
            a._accumulate(out.grad.reshape(a.data.shape))

    return _track(out, (a,), backward)


def stack0(tensors: Iterable) -> Tensor:
    """Stack same-shape tensors along a new leading axis."""
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ValueError("stack0 needs at least one tensor")
    out = Tensor(np.stack([t.data for t in ts], axis=0))

    def backward() -> None:
        for i, t in enumerate(ts):
            if t.requires_grad:
                t._accumulate(out.grad[i])

    return _track(out, ts, backward)


def embedding_mean(table, indices) -> Tensor:
    """Mean of table rows: table[n_rows, d], indices[..., L] -> [..., d]."""
    table = as_tensor(table)
    idx = np.asarray(indices)
    if not np.issubdtype(idx.dtype, np.integer):
        raise ValueError(f"indices must be integers, got dtype {idx.dtype}")
    if idx.min() < 0 or idx.max() >= table.data.shape[0]:
        raise ValueError(
            f"index out of range [0, {table.data.shape[0]}): min {idx.min()}, max {idx.max()}"
        )
    n_avg = idx.shape[-1]
    out = Tensor(table.data[idx].mean(axis=-2))

    def backward() -> None:
        if table.requires_grad:
            g = np.zeros_like(table.data)
            flat_rows = idx.reshape(-1)
            per_row = np.repeat(out.grad.reshape(-1, table.data.shape[1]) / n_avg, n_avg, axis=0)
            np.add.at(g, flat_rows, per_row)
            table._accumulate(g)

    return _track(out, (table,), backward)


def stable_softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    """Softmax with row-max subtraction; plain numpy, no tape."""
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def scaled_dot_attention(q, k, v) -> Tensor:
    """softmax(q k^T / sqrt(d)) v for q[..., a, d], k[..., b, d], v[..., b, d]."""
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    if q.data.ndim < 2 or k.data.ndim < 2 or v.data.ndim < 2:
        raise ValueError("attention operands must be at least 2d")
    d = q.data.shape[-1]
    b_rows = k.data.shape[-2]
    if d == 0 or b_rows == 0:
        raise ValueError(f"attention needs d >= 1 and b >= 1, got d={d}, b={b_rows}")
    if k.data.shape[-1] != d or v.data.shape[-1] != d or v.data.shape[-2] != b_rows:
        raise ValueError(
            f"attention shape mismatch: q{q.data.shape} k{k.data.shape} v{v.data.shape}"
        )
    inv_sqrt_d = 1.0 / np.sqrt(float(d))
    logits = np.matmul(q.data, np.swapaxes(k.data, -1, -2)) * inv_sqrt_d
    probs = stable_softmax(logits, axis=-1)
    out_data = np.matmul(probs, v.data)
    _counts["attention"] += 2 * logits.size * d
    out = Tensor(out_data)

    def backward() -> None:
        g = out.grad
        if v.requires_grad:
            v._accumulate(_unbroadcast(np.matmul(np.swapaxes(probs, -1, -2), g), v.data.shape))
        if q.requires_grad or k.requires_grad:
            d_probs = np.matmul(g, np.swapaxes(v.data, -1, -2))
            d_logits = probs * (d_probs - (d_probs * probs).sum(axis=-1, keepdims=True))
            if q.requires_grad:
                q._accumulate(
                    _unbroadcast(np.matmul(d_logits, k.data) * inv_sqrt_d, q.data.shape)
                )
            if k.requires_grad:
                k._accumulate(
                    _unbroadcast(
                        np.matmul(np.swapaxes(d_logits, -1, -2), q.data) * inv_sqrt_d,
                        k.data.shape,
                    )
                )

    return _track(out, (q, k, v), backward)


def huber_loss(pred, target, delta: float = 1.0) -> Tensor:
    """Mean huber error: quadratic inside |e| <= delta, linear outside."""
    pred = as_tensor(pred)
    target = np.asarray(target, dtype=np.float64)
    if target.shape != pred.data.shape:
        raise ValueError(f"huber shape mismatch: pred{pred.data.shape} target{target.shape}")
    if delta <= 0:
        raise ValueError(f"delta must be positive, got {delta}")
    e = pred.data - target
    abs_e = np.abs(e)
    small = abs_e <= delta
    vals = np.where(small, 0.5 * e * e, delta * (abs_e - 0.5 * delta))
    out = Tensor(vals.mean())

    def backward() -> None:
        if pred.requires_grad:
            de = np.where(small, e, delta * np.sign(e))
            pred._accumulate(out.grad * de / e.size)

    return _track(out, (pred,), backward)


def pinball_loss(pred, target, quantile_levels) -> Tensor:
    """Mean pinball error over stacked quantile predictions.

    pred[q, ...] holds one prediction block per level; target[...] is shared.
    Per element the loss is max(tau * u, (tau - 1) * u) with u = target - pred,
    so a level-tau head pays tau per unit of underprediction and 1 - tau per
    unit of overprediction; its minimizer is the tau-quantile.
    """
    pred = as_tensor(pred)
    target = np.asarray(target, dtype=np.float64)
    taus = np.asarray(quantile_levels, dtype=np.float64)
    if taus.ndim != 1 or pred.data.shape[0] != taus.shape[0]:
        raise ValueError(f"need one leading block per level: pred{pred.data.shape}, {taus.shape[0]} levels")
    if pred.data.shape[1:] != target.shape:
        raise ValueError(f"pinball shape mismatch: pred{pred.data.shape} target{target.shape}")
    if np.any(taus <= 0.0) or np.any(taus >= 1.0):
        raise ValueError(f"quantile levels must lie in (0, 1), got {taus}")
    tau_b = taus.reshape((-1,) + (1,) * target.ndim)
    u = target - pred.data
    w = np.where(u >= 0.0, tau_b, tau_b - 1.0)
    out = Tensor((w * u).mean())

    def backward() -> None:
        if pred.requires_grad:
            pred._accumulate(-out.grad * w / u.size)

    return _track(out, (pred,), backward)


def sum_all(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data.sum())

    def backward() -> None:
        if a.requires_grad:
            a._accumulate(np.full(a.data.shape, float(out.grad)))

    return _track(out, (a,), backward)


def mean_all(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data.mean())

    def backward() -> None:
        if a.requires_grad:
            a._accumulate(np.full(a.data.shape, float(out.grad) / a.data.size))

    return _track(out, (a,), backward)


class ParamStore:
    """Ordered, named collection of trainable tensors."""

    def __init__(self) -> None:
        self._items: dict[str, Tensor] = {}

    def add(self, name: str, data: np.ndarray) -> Tensor:
        if name in self._items:
            raise ValueError(f"duplicate parameter name {name!r}")
        t = Tensor(np.asarray(data, dtype=np.float64), requires_grad=True, name=name)
        self._items[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._items[name]

    def __contains__(self, name: str) -> bool:
        return name in self._items

    def __len__(self) -> int:
        return len(self._items)

    def names(self) -> list[str]:
        return list(self._items)

    def items(self) -> list[tuple[str, Tensor]]:
        return list(self._items.items())

    def tensors(self) -> list[Tensor]:
        return list(self._items.values())

    @property
    def n_params(self) -> int:
        return sum(t.size for t in self._items.values())

    def zero_grad(self) -> None:
        for t in self._items.values():
            t.grad = None

    def copy(self) -> "ParamStore":
        dup = ParamStore()
        for name, t in self._items.items():
            dup.add(name, t.data.copy())
        return dup

    def load_from(self, other: "ParamStore") -> None:
        if other.names() != self.names():
            raise ValueError("parameter stores have different layouts")
        for name, t in self._items.items():
            src = other[name].data
            if src.shape != t.data.shape:
                raise ValueError(f"shape mismatch for {name!r}: {src.shape} vs {t.data.shape}")
            t.data = src.copy()


@dataclass
class GradCheckReport:
    max_rel_err: float
    tol: float
    passed: bool
    per_tensor: dict[str, float] = field(default_factory=dict)
    worst_name: str = ""

    def __str__(self) -> str:
        lines = [f"gradient check: max rel err {self.max_rel_err:.3e} "
                 f"(tol {self.tol:.1e}) -> {'PASS' if self.passed else 'FAIL'}"]
        for name, err in sorted(self.per_tensor.items(), key=lambda kv: -kv[1]):
            lines.append(f"  {name}: {err:.3e}")
        return "\n".join(lines)


def gradient_check(
    f: Callable[[ParamStore], Tensor],
    params: ParamStore,
    eps: float = 1e-5,
    tol: float = 1e-4,
) -> GradCheckReport:
    """Compare analytic gradients of f(params) against central differences.

    f must be a deterministic scalar-valued function of the store (re-run many
    times with individually perturbed entries). Relative error per entry is
    |analytic - numeric| / max(1e-6, |analytic|, |numeric|).
    """
    if not (1e-6 <= eps <= 1e-4):
        raise ValueError(f"eps must lie in [1e-6, 1e-4], got {eps}")
    params.zero_grad()
    loss = f(params)
    if loss.data.shape != ():
        raise ValueError(f"f must return a scalar, got shape {loss.data.shape}")
    if not np.isfinite(loss.data):
        raise ValueError(f"f returned non-finite value {loss.data}")
    loss.backward()
    analytic = {
        name: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
        for name, t in params.items()
    }

    report = GradCheckReport(max_rel_err=0.0, tol=tol, passed=True)
    with no_grad():
        for name, t in params.items():
            flat = t.data.reshape(-1)
            worst = 0.0
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                f_plus = float(f(params).data)
                flat[i] = orig - eps
                f_minus = float(f(params).data)
                flat[i] = orig
                if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                    raise ValueError(f"f returned non-finite value while perturbing {name!r}")
                numeric = (f_plus - f_minus) / (2.0 * eps)
                a = analytic[name].reshape(-1)[i]
                rel = abs(a - numeric) / max(1e-6, abs(a), abs(numeric))
                worst = max(worst, rel)
            report.per_tensor[name] = worst
            if worst > report.max_rel_err:
                report.max_rel_err = worst
                report.worst_name = name
    report.passed = report.max_rel_err < tol
    return report
