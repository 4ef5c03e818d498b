"""K-th order Langevin Monte Carlo with Picard-Lagrange steps.

Each outer step draws the joint node noise (W(c_1), ..., W(c_M)), starts all
node iterates at the current state and applies the collocation update

    X(c_k) <- e^{c_k h A} x + h sum_j alpha_j(c_k, h) g(X(c_j)) + W(c_k)

``nu_star`` times, where g(X) puts -grad U(X_1) in block 2. The node-M
iterate (c_M = 1) becomes the next state.
"""

from __future__ import annotations

import os
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np

from .algebra import StepPlan, build_canonical, build_plan
from .errors import ContractionWarning, DivergenceError, InvalidParameterError
from .potentials import GradientCounter, Potential
from .streams import TAG_STEP, NormalStream, check_seed


@dataclass
class ChainState:
    """Row i of ``x`` is block X_{i+1}; row 0 is the position."""

    x: np.ndarray
    step_index: int = 0
    grad_evals: int = 0


@dataclass(frozen=True)
class SamplerConfig:
    seed: int
    K: int = 3
    gamma: float = 2.0
    h: float = 0.05
    M: Optional[int] = None
    nu_star: Optional[int] = None
    n_steps: int = 1000
    burn_in: int = 0
    thin: int = 1
    chains: int = 1
    x0: Optional[np.ndarray] = None
    strict: bool = False

    def __post_init__(self):
        check_seed(self.seed)
        if int(self.K) != self.K or self.K < 2:
            raise InvalidParameterError(f"order K must be an integer >= 2, got {self.K}")
        if not (np.isfinite(self.gamma) and self.gamma > 0):
            raise InvalidParameterError(f"gamma must be > 0, got {self.gamma}")
        if not (np.isfinite(self.h) and self.h > 0):
            raise InvalidParameterError(f"step size h must be > 0, got {self.h}")
        if self.nodes < 2:
            raise InvalidParameterError(f"need at least 2 collocation nodes, got {self.nodes}")
        if self.picard < 1:
            raise InvalidParameterError(f"nu_star must be >= 1, got {self.picard}")
        if self.n_steps < 0 or self.burn_in < 0:
            raise InvalidParameterError("n_steps and burn_in must be nonnegative")
        if self.thin < 1 or self.chains < 1:
            raise InvalidParameterError("thin and chains must be positive")

    @property
    def nodes(self) -> int:
        """Collocation node count; K - 1 by default (2 when K = 2)."""
        if self.M is not None:
            return int(self.M)
        return max(self.K - 1, 2)

    @property
    def picard(self) -> int:
        return int(self.nu_star) if self.nu_star is not None else max(self.K - 1, 1)

    def initial_state(self, d: int) -> np.ndarray:
        if self.x0 is None:
            return np.zeros((self.K, d))
        x0 = np.asarray(self.x0, dtype=float)
        if x0.shape == (d,):
            x = np.zeros((self.K, d))
            x[0] = x0
            return x
        if x0.shape != (self.K, d):
            raise InvalidParameterError(f"x0 must have shape ({d},) or ({self.K}, {d}), got {x0.shape}")
        return x0.copy()


@dataclass
class RunReport:
    chain: int
    n_steps: int
    n_samples: int
    grad_evals: int
    wall_time: float
    diverged: bool = False
    error: Optional[str] = None
    mean: list = field(default_factory=list)
    second_moment: float = float("nan")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ChainResult:
    samples: np.ndarray
    steps: np.ndarray
    report: RunReport


def plan_for(config: SamplerConfig) -> StepPlan:
    return build_plan(build_canonical(config.K, config.gamma), config.nodes, config.h)


def check_contraction(plan: StepPlan, p: Potential, strict: bool = False) -> Optional[float]:
    """Warn (or raise when strict) if 2 L h Gamma >= 1/2; returns the factor."""
    if p.L is None:
        return None
    rho = plan.contraction_factor(p.L)
    if rho >= 0.5:
        msg = (f"Picard contraction factor 2*L*h*Gamma = {rho:.3g} >= 0.5 "
               f"(L={p.L}, h={plan.h}); reduce the step size")
        if strict:
            raise InvalidParameterError(msg)
        warnings.warn(msg, ContractionWarning, stacklevel=3)
    return rho


def sample_node_noise(plan: StepPlan, d: int, rng: np.random.Generator) -> np.ndarray:
    """One draw of (W(c_1), ..., W(c_M)) ~ N(0, Sigma_C (x) I_d), shape ``(M, K, d)``."""
    z = rng.standard_normal((plan.M * plan.K, d))
    return (plan.noise_factor @ z).reshape(plan.M, plan.K, d)


def _grad_fn(p) -> Callable:
    return p.grad if isinstance(p, Potential) else p


def picard_advance(plan: StepPlan, grad: Callable, x: np.ndarray, noise: np.ndarray,
                   nu_star: int, trace: Optional[list] = None, step: int = 0) -> np.ndarray:
    """Array-level Picard step; ``x`` has shape ``(K, *batch, d)``.

    ``noise`` has shape ``(M, K, *batch, d)`` (or the same flattened to
    ``(M K, ...)``). When ``trace`` is a list, the largest node-wise change
    of each sweep is appended to it.
    """
    K, M, h = plan.K, plan.M, plan.h
    tail = x.shape[1:]
    xf = x.reshape(K, -1)
    base = plan.exp_stack @ xf + noise.reshape(M * K, -1)
    x1 = np.broadcast_to(xf[0], (M, xf.shape[1]))
    prev = np.broadcast_to(xf, (M, K, xf.shape[1])) if trace is not None else None
    nodes = None
    for _ in range(nu_star):
        g = grad(x1.reshape((M,) + tail)).reshape(M, -1)
        nodes = base - h * (plan.drift_cols @ g)
        x1 = nodes[::K]
        if trace is not None:
            cur = nodes.reshape(M, K, -1)
            trace.append(float(np.sqrt(((cur - prev) ** 2).sum(axis=(1, 2))).max()))
            prev = cur
    if not np.all(np.isfinite(nodes)):
        bad = int(np.flatnonzero(~np.all(np.isfinite(nodes.reshape(M, -1)), axis=1))[0])
        raise DivergenceError(f"non-finite iterate at step {step}, node {bad + 1}",
                              step=step, node=bad + 1)
    return nodes[(M - 1) * K:].reshape((K,) + tail)


def picard_step(plan: StepPlan, p, state: ChainState, noise: np.ndarray, nu_star: int,
                trace: Optional[list] = None) -> ChainState:
    """Advance ``state`` by one outer step of size ``plan.h``."""
    if nu_star < 1:
        raise InvalidParameterError(f"nu_star must be >= 1, got {nu_star}")
    if state.x.shape[0] != plan.K:
        raise InvalidParameterError(f"state has {state.x.shape[0]} blocks, plan expects {plan.K}")
    x = picard_advance(plan, _grad_fn(p), state.x, noise, nu_star, trace, state.step_index + 1)
    points = int(np.prod(state.x.shape[1:-1], dtype=np.int64))
    return ChainState(x=x, step_index=state.step_index + 1,
                      grad_evals=state.grad_evals + nu_star * plan.M * points)


def _retained(n: int, config: SamplerConfig) -> bool:
    return n > config.burn_in and (n - config.burn_in) % config.thin == 0


def drive_chain(config: SamplerConfig, counter: GradientCounter, x: np.ndarray,
                advance: Callable, chain: int, full_state: bool = False) -> ChainResult:
    """Run ``advance(x, step_index)`` for ``config.n_steps`` steps and collect samples.

    Shared by every sampler so that burn-in, thinning, reporting and
    divergence handling behave identically.
    """
    # Overflow is reported as a DivergenceError by the step functions.
    with np.errstate(over="ignore", invalid="ignore"):
        kept, steps = [], []
        t0 = time.perf_counter()
        error = None
        try:
            for n in range(1, config.n_steps + 1):
                x = advance(x, n - 1)
                if _retained(n, config):
                    kept.append(np.array(x if full_state else x[0], copy=True))
                    steps.append(n)
        except DivergenceError as exc:
            error = exc
        d = counter.potential.dim
        shape = (x.shape[0], d) if full_state else (d,)
        samples = np.array(kept).reshape((len(kept),) + shape)
        pos = samples[:, 0] if full_state else samples
        report = RunReport(
            chain=chain,
            n_steps=config.n_steps,
            n_samples=len(kept),
            grad_evals=counter.count,
            wall_time=time.perf_counter() - t0,
            diverged=error is not None,
            error=None if error is None else str(error),
            mean=pos.mean(axis=0).tolist() if len(kept) else [],
            second_moment=float((pos ** 2).sum(axis=1).mean()) if len(kept) else float("nan"),
        )
    result = ChainResult(samples=samples, steps=np.array(steps, dtype=np.int64), report=report)
    if error is not None:
        error.chain = chain
        error.partial = result
        raise error
    return result


def run_chain(config: SamplerConfig, p: Potential, chain: int = 0, *,
              plan: Optional[StepPlan] = None, full_state: bool = False) -> ChainResult:
    """One chain of the Picard-Lagrange sampler.

    Samples are the position blocks after steps ``burn_in + thin``,
    ``burn_in + 2 thin``, ... (all K blocks with ``full_state``). The report's
    ``grad_evals`` is exactly ``n_steps * nu_star * M``.
    """
    if plan is None:
        plan = plan_for(config)
        check_contraction(plan, p, config.strict)
    d = p.dim
    counter = GradientCounter(p)
    stream = NormalStream(config.seed, (plan.M * plan.K, d), chain=chain, tag=TAG_STEP)
    F, nu = plan.noise_factor, config.picard

    def advance(x, n):
        return picard_advance(plan, counter, x, F @ stream.draw(n), nu, step=n + 1)

    return drive_chain(config, counter, config.initial_state(d), advance, chain, full_state)


def default_threads() -> int:
    env = os.environ.get("HOLA_THREADS")
    if env:
        try:
            n = int(env)
        except ValueError:
            raise InvalidParameterError(f"HOLA_THREADS must be an integer, got {env!r}")
        if n < 1:
            raise InvalidParameterError(f"HOLA_THREADS must be >= 1, got {n}")
        return n
    return os.cpu_count() or 1


@dataclass
class EnsembleResult:
    """Pooled output of several chains, rows ordered by chain then step."""

    samples: np.ndarray
    chain_ids: np.ndarray
    steps: np.ndarray
    reports: list
    errors: list

    @property
    def grad_evals(self) -> int:
        return sum(r.grad_evals for r in self.reports)

    @property
    def diverged(self) -> bool:
        return bool(self.errors)


def run_ensemble(config: SamplerConfig, p: Potential, runner: Optional[Callable] = None, *,
                 threads: Optional[int] = None, full_state: bool = False) -> EnsembleResult:
    """Run ``config.chains`` independent chains, possibly concurrently.

    Chain ``i`` draws from substream ``(seed, i)``, so the pooled output is
    the same for any thread count. A diverged chain contributes what it
    produced before failing and an entry in ``errors``.
    """
    runner = runner or run_chain
    threads = default_threads() if threads is None else int(threads)

    def one(chain):
        try:
            return runner(config, p, chain, full_state=full_state), None
        except DivergenceError as exc:
            return exc.partial, f"chain {chain}: {exc}"

    if threads > 1 and config.chains > 1:
        with ThreadPoolExecutor(max_workers=min(threads, config.chains)) as pool:
            outcomes = list(pool.map(one, range(config.chains)))
    else:
        outcomes = [one(c) for c in range(config.chains)]
    results = [r for r, _ in outcomes if r is not None]
    errors = [e for _, e in outcomes if e is not None]
    tail = (config.K, p.dim) if full_state else (p.dim,)
    samples = (np.concatenate([r.samples for r in results]) if results
               else np.zeros((0,) + tail))
    chain_ids = np.concatenate([np.full(len(r.steps), r.report.chain, dtype=np.int64)
                                for r in results]) if results else np.zeros(0, dtype=np.int64)
    steps = (np.concatenate([r.steps for r in results]) if results
             else np.zeros(0, dtype=np.int64))
    return EnsembleResult(samples=samples, chain_ids=chain_ids, steps=steps,
                          reports=[r.report for r in results], errors=errors)
