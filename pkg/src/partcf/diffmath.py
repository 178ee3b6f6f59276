"""Dense float64 matrix kernel with value + gradient primitives.

Matrices are plain 2-D ``numpy.ndarray`` objects of dtype float64. Every
primitive that participates in a loss ships a matching ``*_vjp`` that maps an
upstream gradient to the gradient of the inputs.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    pass


class ParameterError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


def as_matrix(x, name: str = "matrix") -> np.ndarray:
    """Validate and convert ``x`` to a finite 2-D float64 array."""
    m = np.asarray(x, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"{name}: expected 2-D array, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        bad = tuple(int(i) for i in np.argwhere(~np.isfinite(m))[0])
        raise NumericError(f"{name}: non-finite entry at {bad}")
    return m


def matmul(a: np.ndarray, b: np.ndarray, transpose_b: bool = False) -> np.ndarray:
    """Matrix product with a pinned left-to-right accumulation over the inner index.

    BLAS is avoided on purpose: its blocking depends on thread count, which
    would make results differ between machines.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if transpose_b:
        b = b.T
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    n, inner = a.shape
    if b.shape[0] != inner:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    out = np.zeros((n, b.shape[1]), dtype=np.float64)
    for k in range(inner):
        out += a[:, k : k + 1] * b[k : k + 1, :]
    return out


def bmm(a: np.ndarray, b: np.ndarray, transpose_b: bool = False) -> np.ndarray:
    """Batched ``matmul`` over leading axes, same accumulation order per item."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if transpose_b:
        b = np.swapaxes(b, -1, -2)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"bmm operands incompatible: {a.shape} @ {b.shape}")
    inner = a.shape[-1]
    shape = np.broadcast_shapes(a.shape[:-2], b.shape[:-2]) + (a.shape[-2], b.shape[-1])
    out = np.zeros(shape, dtype=np.float64)
    for k in range(inner):
        out += a[..., :, k : k + 1] * b[..., k : k + 1, :]
    return out


def softmax_rows(m: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    if not temperature > 0:
        raise ParameterError(f"temperature must be > 0, got {temperature}")
    x = np.asarray(m, dtype=np.float64) / temperature
    x = x - x.max(axis=1, keepdims=True)
    e = np.exp(x)
    return e / e.sum(axis=1, keepdims=True)


def softmax_rows_vjp(y: np.ndarray, grad_y: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    """Gradient w.r.t. the softmax input, given the output ``y``."""
    inner = (grad_y * y).sum(axis=1, keepdims=True)
    return y * (grad_y - inner) / temperature


def l2norm_rows(m: np.ndarray) -> np.ndarray:
    # zero rows are returned unchanged (padded phrase slots)
    x = np.asarray(m, dtype=np.float64)
    norms = np.sqrt((x * x).sum(axis=1, keepdims=True))
    safe = np.where(norms > 0, norms, 1.0)
    return x / safe


def l2norm_rows_vjp(x: np.ndarray, grad_y: np.ndarray) -> np.ndarray:
    """Gradient of ``l2norm_rows`` at ``x``; zero rows pass the gradient through."""
    x = np.asarray(x, dtype=np.float64)
    norms = np.sqrt((x * x).sum(axis=1, keepdims=True))
    safe = np.where(norms > 0, norms, 1.0)
    y = x / safe
    proj = (grad_y * y).sum(axis=1, keepdims=True)
    return np.where(norms > 0, (grad_y - y * proj) / safe, grad_y)


def logsumexp_row(v, temperature: float = 1.0) -> float:
    """``temperature * log(sum(exp(v / temperature)))`` computed with a max shift."""
    v = np.asarray(v, dtype=np.float64).ravel()
    if v.size == 0:
        raise ParameterError("logsumexp of an empty vector")
    if not temperature > 0:
        raise ParameterError(f"temperature must be > 0, got {temperature}")
    x = v / temperature
    top = x.max()
    return float(temperature * (top + np.log(np.exp(x - top).sum())))


@dataclass
class GradCheckReport:
    passed: bool
    max_rel_err: float
    worst_input: int
    worst_index: tuple
    rel_tol: float
    step: float
    per_input_max: list = field(default_factory=list)

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{status} max_rel_err={self.max_rel_err:.3e} (tol {self.rel_tol:g}, "
                f"h={self.step:g}) worst input {self.worst_input} at {self.worst_index}")


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    """Elementwise ``|a - n| / max(|a|, |n|, floor)``.

    The floor keeps entries whose true derivative is ~0 from dividing
    round-off noise by round-off noise.
    """
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / scale


def finite_diff_check(
    f: Callable[..., tuple],
    inputs: Sequence[np.ndarray],
    step: float = 1e-4,
    rel_tol: float = 1e-4,
    floor: float = 1e-6,
    extrapolate: bool | str = False,
    value_fn: Callable[..., float] | None = None,
) -> GradCheckReport:
    """Compare analytic gradients with central differences.

    ``f(*inputs)`` must return ``(value, grads)`` where ``grads[i]`` has the
    shape of ``inputs[i]``. Inputs may have any number of dimensions.

    With ``extrapolate`` the estimate combines central differences at ``h``
    and ``h/2`` (Richardson), cancelling the O(h^2) truncation term; this
    matters for sharp losses whose third derivative is large at ``h``.
    ``extrapolate="auto"`` refines only entries whose plain estimate misses
    ``rel_tol``, so a wrong analytic entry still fails.
    ``value_fn`` is an optional cheaper value-only twin of ``f`` used for
    the probes.
    """
    if not step > 0:
        raise ParameterError(f"step must be > 0, got {step}")
    if extrapolate not in (False, True, "auto"):
        raise ParameterError(f"extrapolate must be False, True or 'auto', got {extrapolate!r}")
    inputs = [np.array(x, dtype=np.float64) for x in inputs]
    value, grads = f(*inputs)
    probe = value_fn or (lambda *xs: f(*xs)[0])

    def central(x, idx, h, n):
        orig = x[idx]
        x[idx] = orig + h
        fp = float(probe(*inputs))
        x[idx] = orig - h
        fm = float(probe(*inputs))
        x[idx] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError(f"non-finite f when probing input {n} at {idx}")
        return (fp - fm) / (2 * h)

    if len(grads) != len(inputs):
        raise ShapeError(f"f returned {len(grads)} gradients for {len(inputs)} inputs")

    per_input, where = [], []
    for n, (x, g) in enumerate(zip(inputs, grads)):
        g = np.asarray(g, dtype=np.float64)
        if g.shape != x.shape:
            raise ShapeError(f"gradient {n} has shape {g.shape}, input has {x.shape}")
        numeric = np.zeros_like(x)
        for idx in np.ndindex(x.shape):
            d = central(x, idx, step, n)
            refine = extrapolate is True or (
                extrapolate == "auto" and relative_error(g[idx], d, floor) >= rel_tol
            )
            if refine:
                d = (4.0 * central(x, idx, step / 2, n) - d) / 3.0
            numeric[idx] = d
        err = relative_error(g, numeric, floor)
        if err.size:
            per_input.append(float(err.max()))
            where.append(tuple(int(i) for i in np.unravel_index(int(err.argmax()), err.shape)))
        else:
            per_input.append(0.0)
            where.append(())
    if not per_input:
        return GradCheckReport(True, 0.0, -1, (), rel_tol, step, [])
    n = int(np.argmax(per_input))
    max_err = per_input[n]
    return GradCheckReport(max_err < rel_tol, max_err, n, where[n], rel_tol, step, per_input)
