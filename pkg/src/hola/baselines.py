"""Reference samplers: ULA, underdamped (K = 2) and exact Gaussian simulation."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .algebra import (CanonicalOperators, StepPlan, build_canonical, diffusion_cross_covariance,
                      expm, factor_covariance)
from .errors import DivergenceError, InvalidParameterError
from .potentials import GradientCounter, Potential
from .sampler import ChainState, ChainResult, SamplerConfig, drive_chain, picard_step, run_chain
from .streams import TAG_STEP, NormalStream


def ula_step(p, x, h: float, rng: Optional[np.random.Generator] = None, xi=None) -> np.ndarray:
    """Euler-Maruyama step of dX = -grad U(X) dt + sqrt(2) dB.

    Pass either ``rng`` or a pre-drawn standard normal ``xi`` (noise replay).
    """
    x = np.asarray(x, dtype=float)
    if xi is None:
        if rng is None:
            raise InvalidParameterError("ula_step needs rng or xi")
        xi = rng.standard_normal(x.shape)
    grad = p.grad if isinstance(p, Potential) else p
    with np.errstate(over="ignore", invalid="ignore"):
        out = x - h * grad(x) + np.sqrt(2.0 * h) * xi
    if not np.all(np.isfinite(out)):
        raise DivergenceError("non-finite ULA iterate")
    return out


def underdamped_step(plan: StepPlan, p, state: ChainState, noise, nu_star: int) -> ChainState:
    """Second-order (underdamped) step: the K = 2 case of :func:`picard_step`."""
    if plan.K != 2 or plan.M != 2:
        raise InvalidParameterError(f"underdamped step needs K=2, M=2 (got K={plan.K}, M={plan.M})")
    return picard_step(plan, p, state, noise, nu_star)


@dataclass(frozen=True)
class LinearSdeStep:
    """Exact one-step law of the linear dynamics for U = lam x^2 / 2 (one coordinate)."""

    lam: float
    h: float
    mean_op: np.ndarray
    cov: np.ndarray
    cov_factor: np.ndarray


def linear_sde_step(lam: float, ops: CanonicalOperators, h: float) -> LinearSdeStep:
    if lam < 0:
        raise InvalidParameterError(f"lambda must be >= 0, got {lam}")
    if not h > 0:
        raise InvalidParameterError(f"step size h must be > 0, got {h}")
    B = ops.drift_matrix(lam)
    cov = diffusion_cross_covariance(B, B, ops.D, h)
    cov = 0.5 * (cov + cov.T)
    return LinearSdeStep(lam=float(lam), h=float(h), mean_op=expm(h * B), cov=cov,
                         cov_factor=factor_covariance(cov))


def _stacked_steps(lam, ops, h):
    steps = [linear_sde_step(l, ops, h) for l in lam]
    return (np.stack([s.mean_op for s in steps]), np.stack([s.cov_factor for s in steps]))


def stationary_state(lam, K: int, rng: np.random.Generator, batch=()) -> np.ndarray:
    """Draw from the invariant law: X_1 ~ N(0, diag(1/lam)), other blocks N(0, I)."""
    lam = np.asarray(lam, dtype=float)
    z = rng.standard_normal((K,) + tuple(batch) + (lam.size,))
    z[0] /= np.sqrt(lam)
    return z


_EXACT_CHUNK = 4096


def exact_gaussian_chain(lam, ops: CanonicalOperators, h: float, N: int,
                         rng: np.random.Generator, x0=None, substeps: int = 1,
                         full_state: bool = False) -> np.ndarray:
    """Exact simulation of the K-th order dynamics for a diagonal quadratic U.

    Each of the N steps is composed of ``substeps`` exact sub-steps of size
    h / substeps; runs sharing ``rng`` state and the sub-step size therefore
    follow the same path. Returns the position after every step, shape
    ``(N, d)`` (``(N, K, d)`` with ``full_state``).
    """
    lam = np.asarray(lam, dtype=float).reshape(-1)
    if lam.size == 0 or np.any(lam <= 0):
        raise InvalidParameterError(f"lambda entries must be positive, got {lam.tolist()}")
    substeps = int(substeps)
    if substeps < 1:
        raise InvalidParameterError("substeps must be >= 1")
    K, d = ops.K, lam.size
    G, F = _stacked_steps(lam, ops, h / substeps)
    x = np.zeros((K, d)) if x0 is None else np.array(x0, dtype=float).reshape(K, d)
    out = np.empty((N, K, d) if full_state else (N, d))
    total = N * substeps
    fine = 0
    while fine < total:
        z = rng.standard_normal((_EXACT_CHUNK, K, d))
        for i in range(min(_EXACT_CHUNK, total - fine)):
            x = np.einsum("ikl,li->ki", G, x) + np.einsum("ikl,li->ki", F, z[i])
            fine += 1
            if fine % substeps == 0:
                out[fine // substeps - 1] = x if full_state else x[0]
    return out


def _gaussian_lambda(p: Potential) -> np.ndarray:
    if p.name != "gaussian" or "lambda" not in p.params or "shift" in p.params:
        raise InvalidParameterError("the exact-gaussian sampler needs a centered gaussian potential")
    return np.asarray(p.params["lambda"], dtype=float)


def run_exact_chain(config: SamplerConfig, p: Potential, chain: int = 0, *,
                    full_state: bool = False) -> ChainResult:
    """Exact-in-distribution chain with the same sampling schedule as ``run_chain``."""
    lam = _gaussian_lambda(p)
    ops = build_canonical(config.K, config.gamma)
    G, F = _stacked_steps(lam, ops, config.h)
    stream = NormalStream(config.seed, (config.K, p.dim), chain=chain, tag=TAG_STEP)

    def advance(x, n):
        return np.einsum("ikl,li->ki", G, x) + np.einsum("ikl,li->ki", F, stream.draw(n))

    return drive_chain(config, GradientCounter(p), config.initial_state(p.dim), advance,
                       chain, full_state)


def run_ula_chain(config: SamplerConfig, p: Potential, chain: int = 0, *,
                  full_state: bool = False) -> ChainResult:
    """ULA chain; the state is the position only (one block)."""
    counter = GradientCounter(p)
    stream = NormalStream(config.seed, (p.dim,), chain=chain, tag=TAG_STEP)
    h = config.h

    def advance(x, n):
        try:
            return ula_step(counter, x, h, xi=stream.draw(n)[None, :])
        except DivergenceError as exc:
            raise DivergenceError(f"non-finite ULA iterate at step {n + 1}", step=n + 1) from exc

    x0 = config.initial_state(p.dim)[:1]
    return drive_chain(config, counter, x0, advance, chain, full_state)


def run_underdamped_chain(config: SamplerConfig, p: Potential, chain: int = 0, *,
                          full_state: bool = False) -> ChainResult:
    x0 = config.x0
    if x0 is not None and np.ndim(x0) == 2:
        x0 = np.asarray(x0)[:2]
    cfg = dataclasses.replace(config, K=2, M=2, x0=x0)
    return run_chain(cfg, p, chain, full_state=full_state)


RUNNERS = {
    "hola": run_chain,
    "ula": run_ula_chain,
    "underdamped": run_underdamped_chain,
    "exact-gaussian": run_exact_chain,
}
