"""Gradient oracles for the potential U of a target density exp(-U).

The sampler only ever sees ``grad``; ``value`` exists so gradients can be
checked against finite differences. Gradients accept batched input of shape
``(..., d)`` and act on the last axis.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import InvalidParameterError, UnsupportedOperationError

ArrayFn = Callable[[np.ndarray], np.ndarray]

# Number of higher-order smoothness constants recorded for built-ins.
_HIGHER_L_DEPTH = 8


@dataclass(frozen=True)
class Potential:
    """Immutable gradient oracle with its convexity/smoothness constants.

    ``m`` and ``L`` may be left as ``None`` for ad-hoc potentials (tests use a
    zero gradient, for instance); the step-size guard is then skipped.
    """

    dim: int
    grad: ArrayFn
    value: Optional[ArrayFn] = None
    m: Optional[float] = None
    L: Optional[float] = None
    higher_L: tuple = ()
    minimizer: Optional[np.ndarray] = None
    name: str = "custom"
    params: dict = field(default_factory=dict)
    value_offset: float = 0.0

    def __post_init__(self):
        if int(self.dim) < 1:
            raise InvalidParameterError(f"dim must be a positive integer, got {self.dim}")
        if self.m is not None and not self.m > 0:
            raise InvalidParameterError(f"strong convexity m must be > 0, got {self.m}")
        if self.m is not None and self.L is not None and self.L < self.m:
            raise InvalidParameterError(f"need m <= L, got m={self.m}, L={self.L}")
        if self.minimizer is None:
            object.__setattr__(self, "minimizer", np.zeros(self.dim))
        else:
            object.__setattr__(self, "minimizer", np.asarray(self.minimizer, dtype=float))


def gaussian_potential(lam: Sequence[float]) -> Potential:
    """Diagonal quadratic U(x) = sum_i lam_i x_i^2 / 2.

    The stationary law of the position is N(0, diag(1/lam)).
    """
    lam = np.asarray(lam, dtype=float).reshape(-1)
    if lam.size == 0 or not np.all(np.isfinite(lam)) or np.any(lam <= 0):
        raise InvalidParameterError(f"lambda entries must be positive, got {lam.tolist()}")
    lam.setflags(write=False)

    def grad(x):
        return lam * np.asarray(x, dtype=float)

    def value(x):
        x = np.asarray(x, dtype=float)
        return 0.5 * np.sum(lam * x * x, axis=-1)

    L = float(lam.max())
    return Potential(
        dim=lam.size,
        grad=grad,
        value=value,
        m=float(lam.min()),
        L=L,
        higher_L=(L,) + (0.0,) * (_HIGHER_L_DEPTH - 1),
        name="gaussian",
        params={"lambda": lam.tolist()},
    )


def hyperbolic_potential(d: int, m: float) -> Potential:
    """U(x) = sum_i sqrt(1 + x_i^2) + m |x|^2 / 2.

    Non-quadratic, with Hessian eigenvalues in (m, 1 + m] and all higher
    derivatives of the gradient bounded. ``value(0) == d``; that offset is
    stored in ``value_offset``.
    """
    d = int(d)
    if d < 1:
        raise InvalidParameterError(f"d must be a positive integer, got {d}")
    if not m > 0:
        raise InvalidParameterError(f"m must be > 0, got {m}")
    m = float(m)

    def grad(x):
        x = np.asarray(x, dtype=float)
        return x / np.sqrt(1.0 + x * x) + m * x

    def value(x):
        x = np.asarray(x, dtype=float)
        return np.sum(np.sqrt(1.0 + x * x), axis=-1) + 0.5 * m * np.sum(x * x, axis=-1)

    return Potential(
        dim=d,
        grad=grad,
        value=value,
        m=m,
        L=1.0 + m,
        higher_L=(1.0 + m,) + (3.0,) * (_HIGHER_L_DEPTH - 1),
        name="hyperbolic",
        params={"m": m, "dim": d},
        value_offset=float(d),
    )


def shift(p: Potential, x_star) -> Potential:
    """Translate ``p`` so that its minimizer moves by ``x_star``."""
    x_star = np.asarray(x_star, dtype=float).reshape(-1)
    if x_star.shape != (p.dim,):
        raise InvalidParameterError(f"shift must have shape ({p.dim},), got {x_star.shape}")
    inner_grad, inner_value = p.grad, p.value

    def grad(x):
        return inner_grad(np.asarray(x, dtype=float) - x_star)

    value = None
    if inner_value is not None:
        def value(x):
            return inner_value(np.asarray(x, dtype=float) - x_star)

    return Potential(
        dim=p.dim,
        grad=grad,
        value=value,
        m=p.m,
        L=p.L,
        higher_L=p.higher_L,
        minimizer=p.minimizer + x_star,
        name=p.name,
        params={**p.params, "shift": x_star.tolist()},
        value_offset=p.value_offset,
    )


def check_gradient(p: Potential, points, fd_step: float = 1e-5) -> float:
    """Max |analytic - centered finite difference| over points and coordinates."""
    if p.value is None:
        raise UnsupportedOperationError(f"potential {p.name!r} has no value oracle")
    if not fd_step > 0:
        raise InvalidParameterError(f"fd_step must be > 0, got {fd_step}")
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    worst = 0.0
    eye = np.eye(p.dim) * fd_step
    for x in pts:
        fd = (p.value(x + eye) - p.value(x - eye)) / (2.0 * fd_step)
        worst = max(worst, float(np.max(np.abs(p.grad(x) - fd))))
    return worst


class GradientCounter:
    """Per-chain tally of gradient evaluations.

    One evaluation is one point, so a batched call on an ``(M, d)`` array
    adds ``M``.
    """

    def __init__(self, potential: Potential):
        self.potential = potential
        self.count = 0

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        self.count += int(np.prod(x.shape[:-1], dtype=np.int64))
        return self.potential.grad(x)


def potential_from_config(name: str, dim: Optional[int] = None, lam=None, m=None) -> Potential:
    """Build a built-in potential from CLI/config fields."""
    if name == "gaussian":
        if lam is None:
            if dim is None:
                raise InvalidParameterError("gaussian potential needs lambda or dim")
            lam = [1.0] * int(dim)
        lam = list(lam)
        if dim is not None and len(lam) != int(dim):
            raise InvalidParameterError(f"lambda has {len(lam)} entries but dim={dim}")
        return gaussian_potential(lam)
    if name == "hyperbolic":
        return hyperbolic_potential(1 if dim is None else dim, 1.0 if m is None else m)
    raise InvalidParameterError(f"unknown potential {name!r}")
