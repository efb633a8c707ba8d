"""Tensor primitives with reverse-mode gradients, and a finite-difference checker.

Tensors are ``torch.Tensor`` values; torch's define-by-run graph plays the role
of the gradient tape. The wrappers here add the shape contracts the rest of
the package relies on (errors that name both shapes, trailing-dimension
broadcasting, stable softmax, single backward per graph).

The gradient checker is independent of the autograd engine: it perturbs inputs
one coordinate at a time and takes central differences in float64.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import torch

Tensor = torch.Tensor

LAYER_NORM_EPS = 1e-5


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class AxisError(ValueError):
    """Axis index is out of range for the tensor's rank."""


class BackwardError(RuntimeError):
    """Backward was called on a non-scalar loss or twice on the same graph."""


def _shape(t: Tensor) -> Tuple[int, ...]:
    return tuple(t.shape)


def _check_axis(x: Tensor, axis: int) -> int:
    if not -x.ndim <= axis < x.ndim:
        raise AxisError(f"axis {axis} is invalid for tensor of shape {_shape(x)}")
    return axis % x.ndim


def _broadcast(a_shape: Sequence[int], b_shape: Sequence[int], what: str) -> Tuple[int, ...]:
    try:
        return tuple(torch.broadcast_shapes(tuple(a_shape), tuple(b_shape)))
    except RuntimeError:
        raise ShapeError(f"{what}: shapes {tuple(a_shape)} and {tuple(b_shape)} do not broadcast") from None


def tensor(values, requires_grad: bool = False, dtype: torch.dtype = torch.float64) -> Tensor:
    """Build a tensor from nested lists or an array."""
    return torch.tensor(np.asarray(values), dtype=dtype, requires_grad=requires_grad)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product ``a[.., m, k] @ b[.., k, n]``."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply {_shape(a)} by {_shape(b)}")
    _broadcast(a.shape[:-2], b.shape[:-2], "matmul batch extents")
    return a @ b


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Softmax along ``axis`` with the per-slice max subtracted first."""
    axis = _check_axis(x, axis)
    # torch's kernel subtracts the slice max before exponentiating
    return torch.softmax(x, dim=axis)


def layer_norm(x: Tensor, axis: int, gamma: Tensor, beta: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    axis = _check_axis(x, axis)
    n = x.shape[axis]
    if tuple(gamma.shape) != (n,) or tuple(beta.shape) != (n,):
        raise ShapeError(
            f"layer_norm: gamma {_shape(gamma)} / beta {_shape(beta)} must both be ({n},) "
            f"for axis {axis} of {_shape(x)}"
        )
    if axis == x.ndim - 1:
        return torch.nn.functional.layer_norm(x, (n,), gamma, beta, eps)
    mu = x.mean(dim=axis, keepdim=True)
    var = ((x - mu) ** 2).mean(dim=axis, keepdim=True)
    y = (x - mu) / torch.sqrt(var + eps)
    view = [1] * x.ndim
    view[axis] = n
    return y * gamma.view(view) + beta.view(view)


_ELEMENTWISE = {
    "add": torch.add,
    "sub": torch.sub,
    "mul": torch.mul,
}


def elementwise(op: str, a: Tensor, b: Tensor) -> Tensor:
    """Pointwise ``add``/``sub``/``mul`` with extent-1 broadcasting."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}; expected one of {sorted(_ELEMENTWISE)}") from None
    _broadcast(a.shape, b.shape, f"elementwise {op}")
    return fn(a, b)


def mean(x: Tensor, axis: int) -> Tensor:
    """Mean along ``axis``, keeping it as extent 1."""
    axis = _check_axis(x, axis)
    return x.mean(dim=axis, keepdim=True)


def backward(loss: Tensor) -> None:
    """Backpropagate a scalar loss into every leaf that requires grad.

    A graph may be consumed once; a second call on the same loss raises.
    """
    if loss.numel() != 1:
        raise BackwardError(f"backward needs a scalar loss, got shape {_shape(loss)}")
    if not loss.requires_grad:
        raise BackwardError("loss does not depend on any tensor that requires grad")
    if getattr(loss, "_backward_done", False):
        raise BackwardError("backward already ran on this graph; rebuild it with a fresh forward pass")
    loss.reshape(()).backward()
    loss._backward_done = True


def zero_grad(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    """Per-element comparison of analytic and central-difference gradients.

    ``errors`` holds ``|analytic - numeric| / max(|analytic|, |numeric|, floor)``
    for every checked coordinate, keyed by input name.
    """

    tol: float
    h: float
    errors: Dict[str, np.ndarray] = field(default_factory=dict)
    analytic: Dict[str, np.ndarray] = field(default_factory=dict)
    numeric: Dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def max_error(self) -> float:
        if not self.errors:
            return 0.0
        return max(float(e.max(initial=0.0)) for e in self.errors.values())

    @property
    def passed(self) -> bool:
        return self.max_error < self.tol

    @property
    def failures(self) -> List[str]:
        return [name for name, e in self.errors.items() if e.size and float(e.max()) >= self.tol]

    def summary(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        worst = ", ".join(self.failures) or "-"
        return f"{status} max_rel_err={self.max_error:.3e} tol={self.tol:.1e} failing={worst}"


def _relative_error(a: np.ndarray, n: np.ndarray, floor: float) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return np.abs(a - n) / denom


def _numeric_grad(f: Callable[[], Tensor], flat: Tensor, idx: np.ndarray, h: float) -> np.ndarray:
    out = np.empty(len(idx))
    with torch.no_grad():
        for k, i in enumerate(idx):
            orig = flat[i].item()
            flat[i] = orig + h
            fp = f().item()
            flat[i] = orig - h
            fm = f().item()
            flat[i] = orig
            out[k] = (fp - fm) / (2.0 * h)
    return out


def _sample_indices(numel: int, max_elems: Optional[int], rng: np.random.Generator) -> np.ndarray:
    if max_elems is None or numel <= max_elems:
        return np.arange(numel)
    return np.sort(rng.choice(numel, size=max_elems, replace=False))


def grad_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    h: float = 1e-4,
    tol: float = 1e-4,
    floor: float = 1e-3,
    max_elems: Optional[int] = None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare autograd's gradient of scalar ``f`` at ``x`` with central differences.

    Runs in float64. ``max_elems`` limits the check to a random subset of
    coordinates.
    """
    x64 = x.detach().to(torch.float64).clone().requires_grad_(True)
    out = f(x64)
    (g,) = torch.autograd.grad(out.reshape(()), x64, allow_unused=True)
    g = torch.zeros_like(x64) if g is None else g
    rng = np.random.default_rng(seed)
    idx = _sample_indices(x64.numel(), max_elems, rng)
    analytic = g.detach().reshape(-1).numpy()[idx]
    probe = x64.detach().clone()
    flat = probe.view(-1)
    numeric = _numeric_grad(lambda: f(probe), flat, idx, h)
    report = GradCheckReport(tol=tol, h=h)
    report.analytic["x"] = analytic
    report.numeric["x"] = numeric
    report.errors["x"] = _relative_error(analytic, numeric, floor)
    return report


def grad_check_module(
    module: torch.nn.Module,
    loss_fn: Callable[[], Tensor],
    inputs: Optional[Dict[str, Tensor]] = None,
    h: float = 1e-4,
    tol: float = 1e-4,
    floor: float = 1e-3,
    max_elems: Optional[int] = 32,
    seed: int = 0,
) -> GradCheckReport:
    """Gradient-check every parameter of ``module`` (and any named ``inputs``).

    ``module`` must already be in float64. ``loss_fn`` re-runs the forward pass
    and returns a scalar; it must read the parameters and inputs in place.
    """
    inputs = inputs or {}
    targets: List[Tuple[str, Tensor]] = [(f"input:{k}", v) for k, v in inputs.items()]
    targets += [(name, p) for name, p in module.named_parameters()]
    leaves = [t for _, t in targets]
    for t in leaves:
        if t.dtype != torch.float64:
            raise TypeError("grad_check_module needs float64 parameters and inputs")
        t.requires_grad_(True)
    out = loss_fn()
    grads = torch.autograd.grad(out.reshape(()), leaves, allow_unused=True)
    rng = np.random.default_rng(seed)
    report = GradCheckReport(tol=tol, h=h)
    for (name, t), g in zip(targets, grads):
        g = torch.zeros_like(t) if g is None else g
        idx = _sample_indices(t.numel(), max_elems, rng)
        analytic = g.detach().reshape(-1).numpy()[idx]
        numeric = _numeric_grad(loss_fn, t.data.view(-1), idx, h)
        report.analytic[name] = analytic
        report.numeric[name] = numeric
        report.errors[name] = _relative_error(analytic, numeric, floor)
    return report


class _FlipGrad(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x):
        return x.view_as(x)

    @staticmethod
    def backward(ctx, g):
        return -g


def flip_grad(x: Tensor) -> Tensor:
    """Identity forward, negated gradient backward. Fault injection for the check harness."""
    return _FlipGrad.apply(x)
