"""Statistical and theoretical checks for the samplers.

The order sweep measures stationary discretization bias against a Gaussian
target. Two moment estimators are available:

* ``plain``: empirical mean and covariance of the retained positions.
* ``coupled``: each chain is paired with an exact shadow chain driven by the
  same Brownian path, started from the same stationary draw. The shadow's
  moments are known exactly, so ``sample - shadow + exact`` estimates the
  sampler's stationary moments with the common Monte Carlo noise removed.
  This is what makes biases far below the plain noise floor measurable.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .algebra import (build_canonical, build_plan, joint_noise_covariance, factor_covariance,
                      lebesgue_bound, lebesgue_constant, make_nodes, skew_backbone, _backbone)
from .baselines import _stacked_steps, stationary_state
from .errors import (DivergenceError, InsufficientDataError, InvalidParameterError)
from .potentials import GradientCounter, Potential
from .sampler import SamplerConfig, picard_advance
from .streams import TAG_BOOT, TAG_INIT, TAG_PROBE, TAG_SWEEP, NormalStream, generator


# ---------------------------------------------------------------------------
# moments and W2

@dataclass
class MomentReport:
    n_samples: int
    mean: np.ndarray
    cov: np.ndarray
    second_moment_x1: float
    grad_second_moment: Optional[float] = None

    def to_dict(self) -> dict:
        return {
            "n_samples": self.n_samples,
            "mean": self.mean.tolist(),
            "cov": self.cov.tolist(),
            "second_moment_x1": self.second_moment_x1,
            "grad_second_moment": self.grad_second_moment,
        }


def moment_report(samples, p: Optional[Potential] = None) -> MomentReport:
    x = np.asarray(samples, dtype=float)
    if x.ndim != 2 or x.shape[0] < 2:
        raise InsufficientDataError("need at least two samples of shape (n, d)")
    cov = np.atleast_2d(np.cov(x, rowvar=False))
    cov = 0.5 * (cov + cov.T)
    centered = x - (p.minimizer if p is not None else 0.0)
    grad2 = None
    if p is not None:
        grad2 = float(np.mean(np.sum(p.grad(x) ** 2, axis=1)))
    return MomentReport(n_samples=x.shape[0], mean=x.mean(axis=0), cov=cov,
                        second_moment_x1=float(np.mean(np.sum(centered ** 2, axis=1))),
                        grad_second_moment=grad2)


def _psd_sqrt(C, tol=1e-10):
    w, V = np.linalg.eigh(0.5 * (C + C.T))
    if w.min() < -tol * max(1.0, w.max()):
        raise InvalidParameterError(f"covariance is not PSD (min eigenvalue {w.min():.3e})")
    return (V * np.sqrt(np.clip(w, 0.0, None))) @ V.T


def gaussian_w2(mean1, cov1, mean2, cov2) -> float:
    """Wasserstein-2 distance between two Gaussians (Bures-Wasserstein form)."""
    m1, m2 = np.atleast_1d(np.asarray(mean1, float)), np.atleast_1d(np.asarray(mean2, float))
    C1, C2 = np.atleast_2d(np.asarray(cov1, float)), np.atleast_2d(np.asarray(cov2, float))
    r2 = _psd_sqrt(C2)
    _psd_sqrt(C1)
    cross = _psd_sqrt(r2 @ C1 @ r2)
    val = float(np.sum((m1 - m2) ** 2) + np.trace(C1) + np.trace(C2) - 2.0 * np.trace(cross))
    return float(np.sqrt(max(val, 0.0)))


def batch_means_se(values, n_batches: int = 20) -> float:
    """Standard error of the mean of an autocorrelated series via batch means."""
    v = np.asarray(values, dtype=float).reshape(-1)
    n = v.size // n_batches
    if n < 1:
        raise InsufficientDataError(f"need at least {n_batches} values")
    means = v[: n * n_batches].reshape(n_batches, n).mean(axis=1)
    return float(means.std(ddof=1) / np.sqrt(n_batches))


# ---------------------------------------------------------------------------
# stationary moment bounds

@dataclass
class MomentBoundCheck:
    passed: bool
    second_moment: float
    second_moment_se: float
    second_moment_bound: float
    grad_moment: float
    grad_moment_se: float
    grad_moment_bound: float
    slack: float
    n_se: float

    @property
    def margins(self) -> tuple:
        """Allowed minus observed for each inequality (nonnegative when passing)."""
        return (self.slack * self.second_moment_bound + self.n_se * self.second_moment_se
                - self.second_moment,
                self.slack * self.grad_moment_bound + self.n_se * self.grad_moment_se
                - self.grad_moment)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["margins"] = list(self.margins)
        return out


def stationary_moment_check(samples, p: Potential, slack: float = 1.1, n_se: float = 3.0,
                            min_samples: int = 10_000) -> MomentBoundCheck:
    """Check E|X1 - x*|^2 <= d/m and E|grad U(X1)|^2 <= L^2 d/m empirically.

    Each estimate must stay below ``slack * bound + n_se * se``, with standard
    errors from batch means (samples are assumed in chain order).
    """
    x = np.asarray(samples, dtype=float)
    if x.ndim != 2 or x.shape[0] < min_samples:
        raise InsufficientDataError(f"need at least {min_samples} samples, got {len(x)}")
    if p.m is None or p.L is None:
        raise InvalidParameterError("potential needs m and L for the moment bounds")
    d = p.dim
    sq = np.sum((x - p.minimizer) ** 2, axis=1)
    g2 = np.sum(p.grad(x) ** 2, axis=1)
    b1, b2 = d / p.m, p.L ** 2 * d / p.m
    s1, s2 = batch_means_se(sq), batch_means_se(g2)
    e1, e2 = float(sq.mean()), float(g2.mean())
    passed = e1 <= slack * b1 + n_se * s1 and e2 <= slack * b2 + n_se * s2
    return MomentBoundCheck(passed=bool(passed), second_moment=e1, second_moment_se=s1,
                            second_moment_bound=b1, grad_moment=e2, grad_moment_se=s2,
                            grad_moment_bound=b2, slack=slack, n_se=n_se)


# ---------------------------------------------------------------------------
# order sweep

SWEEP_SAMPLERS = ("hola", "underdamped", "ula", "exact-gaussian")


@dataclass
class SweepPoint:
    """Per-(time block, chain) sufficient statistics of one sweep run."""

    h: float
    n_steps: int
    grad_evals: int
    count: np.ndarray           # (blocks,)
    s1: np.ndarray              # (blocks, chains, d)
    s2: np.ndarray              # (blocks, chains, d, d)
    shadow_s1: Optional[np.ndarray] = None
    shadow_s2: Optional[np.ndarray] = None

    def moments(self, weights=None, shadow=False):
        s1 = self.shadow_s1 if shadow else self.s1
        s2 = self.shadow_s2 if shadow else self.s2
        w = np.ones(s1.shape[:2]) if weights is None else weights
        n = float(np.sum(w * self.count[:, None]))
        mean = np.einsum("bc,bci->i", w, s1) / n
        second = np.einsum("bc,bcij->ij", w, s2) / n
        cov = second - np.outer(mean, mean)
        return mean, 0.5 * (cov + cov.T)

    def error(self, target_mean, target_cov, estimator: str, weights=None) -> float:
        mean, cov = self.moments(weights)
        if estimator == "coupled":
            ms, cs = self.moments(weights, shadow=True)
            mean, cov = mean - ms + target_mean, cov - cs + target_cov
        return gaussian_w2(mean, cov, target_mean, target_cov)


@dataclass
class OrderSweepResult:
    sampler: str
    estimator: str
    h_values: list
    errors: list
    fitted_slope: float
    slope_ci: tuple
    plain_errors: list = field(default_factory=list)
    grad_evals: list = field(default_factory=list)
    T: float = 0.0
    chains: int = 1
    partial: bool = False
    error_message: Optional[str] = None

    @property
    def monotone(self) -> bool:
        e = self.errors
        return all(b < a for a, b in zip(e[:-1], e[1:]))

    def to_dict(self) -> dict:
        out = asdict(self)
        out["slope_ci"] = list(self.slope_ci)
        out["monotone"] = self.monotone
        return out


def fit_slope(h_values, errors) -> float:
    """Least-squares slope of log(error) against log(h)."""
    lh, le = np.log(np.asarray(h_values, float)), np.log(np.asarray(errors, float))
    return float(np.polyfit(lh, le, 1)[0])


def _target(p: Potential):
    if p.name != "gaussian" or "shift" in p.params:
        raise InvalidParameterError("order sweeps need a centered gaussian potential")
    lam = np.asarray(p.params["lambda"], dtype=float)
    return lam, np.zeros(lam.size), np.diag(1.0 / lam)


def _accumulate(point, block, x, y):
    point.count[block] += 1
    point.s1[block] += x
    point.s2[block] += np.einsum("ci,cj->cij", x, x)
    if y is not None:
        point.shadow_s1[block] += y
        point.shadow_s2[block] += np.einsum("ci,cj->cij", y, y)


def sweep_point(p: Potential, template: SamplerConfig, h: float, sampler: str = "hola",
                T: float = 2000.0, burn_in_time: float = 20.0, chains: int = 16,
                estimator: str = "coupled", n_blocks: int = 10, stream_key: int = 0,
                fine_h: Optional[float] = None) -> SweepPoint:
    """Run ``chains`` vectorized chains at step ``h`` for simulated time ``T``.

    Chains start from a draw of the exact invariant law. ``stream_key``
    selects the noise substream; the exact sampler always composes sub-steps
    of size ``fine_h`` from one shared substream, so runs at different h
    follow the same Brownian path.
    """
    if sampler not in SWEEP_SAMPLERS:
        raise InvalidParameterError(f"unknown sampler {sampler!r}")
    if estimator not in ("plain", "coupled"):
        raise InvalidParameterError(f"unknown estimator {estimator!r}")
    lam, _, _ = _target(p)
    d, C = p.dim, int(chains)
    n_steps = int(round(T / h))
    n_burn = int(round(burn_in_time / h))
    if n_steps < n_blocks:
        raise InvalidParameterError(f"T/h = {n_steps} steps is fewer than {n_blocks} blocks")
    coupled = estimator == "coupled" and sampler != "exact-gaussian"
    K = 2 if sampler == "underdamped" else (1 if sampler == "ula" else template.K)
    counter = GradientCounter(p)
    init = generator(template.seed, TAG_INIT, stream_key)
    if sampler == "ula":
        x = stationary_state(lam, 1, init, (C,))[0]
    else:
        x = stationary_state(lam, K, init, (C,))
    y = x.copy() if coupled else None

    point = SweepPoint(h=float(h), n_steps=n_steps, grad_evals=0,
                       count=np.zeros(n_blocks, dtype=np.int64),
                       s1=np.zeros((n_blocks, C, d)), s2=np.zeros((n_blocks, C, d, d)))
    if coupled:
        point.shadow_s1 = np.zeros_like(point.s1)
        point.shadow_s2 = np.zeros_like(point.s2)

    if sampler in ("hola", "underdamped"):
        M = template.nodes if sampler == "hola" else 2
        nu = template.picard
        ops = build_canonical(K, template.gamma)
        plan = build_plan(ops, M, h)
        if p.L is not None and plan.contraction_factor(p.L) >= 0.5:
            raise InvalidParameterError(f"h={h} violates the Picard contraction guard")
        MK = M * K
        if coupled:
            factors = np.stack([
                factor_covariance(joint_noise_covariance(
                    [(ops.A, c * h) for c in plan.nodes.nodes] + [(ops.drift_matrix(l), h)],
                    ops.D))
                for l in lam])
            G_shadow, _ = _stacked_steps(lam, ops, h)
            stream = NormalStream(template.seed, (MK + K, C, d), chain=stream_key, tag=TAG_SWEEP)
        else:
            stream = NormalStream(template.seed, (MK, C, d), chain=stream_key, tag=TAG_SWEEP)

        def step(n, x, y):
            z = stream.draw(n)
            if coupled:
                w = np.einsum("inm,mci->nci", factors, z)
                x = picard_advance(plan, counter, x, w[:MK], nu, step=n + 1)
                y = np.einsum("ikl,lci->kci", G_shadow, y) + w[MK:]
            else:
                w = plan.noise_factor @ z.reshape(MK, -1)
                x = picard_advance(plan, counter, x, w, nu, step=n + 1)
            return x, y

        pos = lambda s: s[0]
    elif sampler == "ula":
        if coupled:
            factors = np.stack([factor_covariance(joint_noise_covariance(
                [(np.zeros((1, 1)), h), (np.array([[-l]]), h)], np.eye(1))) for l in lam])
            decay = np.exp(-lam * h)
            stream = NormalStream(template.seed, (2, C, d), chain=stream_key, tag=TAG_SWEEP)
        else:
            stream = NormalStream(template.seed, (C, d), chain=stream_key, tag=TAG_SWEEP)
        root = np.sqrt(2.0 * h)

        def step(n, x, y):
            z = stream.draw(n)
            if coupled:
                w = np.einsum("inm,mci->nci", factors, z)
                x = x - h * counter(x) + w[0]
                y = decay * y + w[1]
            else:
                x = x - h * counter(x) + root * z
            if not np.all(np.isfinite(x)):
                raise DivergenceError(f"non-finite ULA iterate at step {n + 1}", step=n + 1)
            return x, y

        pos = lambda s: s
    else:
        fine_h = h if fine_h is None else fine_h
        r = int(round(h / fine_h))
        if r < 1 or abs(r * fine_h - h) > 1e-9 * h:
            raise InvalidParameterError(f"h={h} is not a multiple of the shared sub-step {fine_h}")
        ops = build_canonical(K, template.gamma)
        G, F = _stacked_steps(lam, ops, fine_h)
        stream = NormalStream(template.seed, (K, C, d), chain=0, tag=TAG_SWEEP)

        def step(n, x, y):
            for i in range(r):
                x = (np.einsum("ikl,lci->kci", G, x)
                     + np.einsum("ikl,lci->kci", F, stream.draw(n * r + i)))
            return x, y

        pos = lambda s: s[0]

    with np.errstate(over="ignore", invalid="ignore"):
        for n in range(n_burn):
            x, y = step(n, x, y)
        for i in range(n_steps):
            x, y = step(n_burn + i, x, y)
            _accumulate(point, i * n_blocks // n_steps, pos(x), None if y is None else pos(y))
    point.grad_evals = counter.count
    if not (np.all(np.isfinite(point.s2)) and np.all(np.isfinite(point.s1))):
        raise DivergenceError(f"moment sums overflowed at h={h}")
    return point


def order_sweep(p: Potential, template: SamplerConfig, h_values: Sequence[float],
                sampler: str = "hola", T: float = 2000.0, burn_in_time: float = 20.0,
                chains: int = 16, estimator: str = "coupled", n_boot: int = 200,
                n_blocks: int = 10) -> OrderSweepResult:
    """Stationary W2 error against N(0, diag(1/lambda)) across step sizes.

    Simulated time ``T`` is the same for every h. The slope is a least-squares
    fit of log error on log h; its interval comes from a paired block
    bootstrap over (time block, chain) units.
    """
    h_values = [float(h) for h in h_values]
    if len(h_values) < 2 or any(b >= a for a, b in zip(h_values[:-1], h_values[1:])):
        raise InvalidParameterError("h_values must be strictly decreasing with at least 2 entries")
    if estimator == "coupled" and sampler == "exact-gaussian":
        # The exact sampler is its own shadow; the coupled error would vanish identically.
        estimator = "plain"
    lam, tmean, tcov = _target(p)
    points, message = [], None
    for i, h in enumerate(h_values):
        try:
            points.append(sweep_point(p, template, h, sampler, T, burn_in_time, chains,
                                      estimator, n_blocks, stream_key=i, fine_h=h_values[-1]))
        except DivergenceError as exc:
            message = f"divergence at h={h}: {exc}"
            break
    hs = h_values[:len(points)]
    errors = [pt.error(tmean, tcov, estimator) for pt in points]
    plain = [pt.error(tmean, tcov, "plain") for pt in points]
    slope, ci = float("nan"), (float("nan"), float("nan"))
    if len(points) >= 2 and all(e > 0 for e in errors):
        slope = fit_slope(hs, errors)
        rng = generator(template.seed, TAG_BOOT)
        units = n_blocks * int(chains)
        boot = []
        for _ in range(n_boot):
            w = np.bincount(rng.integers(0, units, units), minlength=units)
            w = w.reshape(n_blocks, int(chains)).astype(float)
            errs = [pt.error(tmean, tcov, estimator, w) for pt in points]
            if all(e > 0 for e in errs):
                boot.append(fit_slope(hs, errs))
        if boot:
            ci = (float(np.percentile(boot, 2.5)), float(np.percentile(boot, 97.5)))
    return OrderSweepResult(sampler=sampler, estimator=estimator, h_values=hs, errors=errors,
                            fitted_slope=slope, slope_ci=ci, plain_errors=plain,
                            grad_evals=[pt.grad_evals for pt in points], T=float(T),
                            chains=int(chains), partial=message is not None,
                            error_message=message)


# ---------------------------------------------------------------------------
# Picard contraction probe

@dataclass
class ProbeResult:
    deltas: np.ndarray          # (steps, nu_star)
    ratios: np.ndarray          # (steps, nu_star - 1), nan where undefined
    max_ratio: float
    bound: Optional[float]

    def to_dict(self) -> dict:
        return {"max_ratio": self.max_ratio, "bound": self.bound,
                "n_steps": int(self.deltas.shape[0]), "nu_star": int(self.deltas.shape[1])}


def picard_probe(plan, p: Potential, n_probe_steps: int = 50, nu_star: int = 4,
                 seed: int = 0, rel_floor: float = 1e-10) -> ProbeResult:
    """Successive Picard sweep changes along a chain, and their ratios.

    Ratios whose denominator has fallen below ``rel_floor`` times the first
    sweep's change are round-off and are reported as nan; an exactly zero
    change gives ratio 0.
    """
    if nu_star < 3:
        raise InvalidParameterError("need nu_star >= 3 to estimate contraction ratios")
    d, K = p.dim, plan.K
    rng = generator(seed, TAG_PROBE)
    x = rng.standard_normal((K, d))
    if p.m is not None:
        x[0] = p.minimizer + x[0] / np.sqrt(p.m)
    stream = NormalStream(seed, (plan.M * K, d), tag=TAG_PROBE)
    deltas = np.zeros((n_probe_steps, nu_star))
    for n in range(n_probe_steps):
        trace = []
        x = picard_advance(plan, p.grad, x, plan.noise_factor @ stream.draw(n), nu_star, trace,
                           step=n + 1)
        deltas[n] = trace
    ratios = np.full((n_probe_steps, nu_star - 1), np.nan)
    for n in range(n_probe_steps):
        first = deltas[n, 0]
        for v in range(nu_star - 1):
            num, den = deltas[n, v + 1], deltas[n, v]
            if num == 0.0:
                ratios[n, v] = 0.0
            elif den > rel_floor * first:
                ratios[n, v] = num / den
    valid = ratios[np.isfinite(ratios)]
    bound = plan.contraction_factor(p.L) if p.L is not None else None
    return ProbeResult(deltas=deltas, ratios=ratios,
                       max_ratio=float(valid.max()) if valid.size else 0.0, bound=bound)


# ---------------------------------------------------------------------------
# interpolation order

@dataclass
class InterpolationOrderResult:
    M: int
    h_values: list
    errors: list
    slope: Optional[float]
    exact: bool

    def to_dict(self) -> dict:
        return asdict(self)


def interpolation_order_check(f: Callable, M: int, h_values: Sequence[float], t0: float = 0.0,
                              grid: int = 2001, exact_tol: float = 1e-12
                              ) -> InterpolationOrderResult:
    """Sup error of the M-node equispaced interpolant of ``f`` on [t0, t0 + h].

    Returns the fitted log-log slope against h, or ``exact=True`` with no
    slope when the curve is reproduced to round-off (degree below M).
    """
    nodes = make_nodes(M)
    sig = np.linspace(0.0, 1.0, grid)
    errors, scale = [], 1.0
    for h in h_values:
        vals = np.asarray(f(t0 + h * nodes.nodes), dtype=float).reshape(M, -1)
        truth = np.asarray(f(t0 + h * sig), dtype=float).reshape(grid, -1)
        approx = nodes.interpolate(vals, sig)
        scale = max(scale, float(np.abs(truth).max()))
        errors.append(float(np.sqrt(((approx - truth) ** 2).sum(axis=1)).max()))
    exact = all(e <= exact_tol * scale for e in errors)
    slope = None if exact else fit_slope(h_values, errors)
    return InterpolationOrderResult(M=int(M), h_values=[float(h) for h in h_values],
                                    errors=errors, slope=slope, exact=exact)


# ---------------------------------------------------------------------------
# theory checks

@dataclass
class TheoryReport:
    entries: list
    passed: bool

    def to_dict(self) -> dict:
        return {"passed": self.passed, "entries": self.entries}


def theory_checks(K_values=range(3, 9), gammas=(0.5, 1.0, 2.0, 5.0), M_values=range(2, 7),
                  fake_gamma_negative: bool = False, spectrum_margin: float = 1e-6) -> TheoryReport:
    """Operator-norm bounds on D+Q, positivity of the auxiliary backbone
    spectrum, and the Lebesgue-constant bound.

    ``fake_gamma_negative`` flips the sign of gamma when forming D and Q, a
    planted fault that must make the norm check fail.
    """
    entries = []
    for K in K_values:
        for g in gammas:
            g_used = -g if fake_gamma_negative else g
            D, Q, _, _ = _backbone(int(K), float(g_used))
            norm = float(np.linalg.norm(D + Q, 2))
            lower, upper = np.sqrt(1.0 + g_used ** 2), max(1.0 + 2.0 * g_used, 3.0 * g_used)
            ok = lower - 1e-12 <= norm <= upper + 1e-12
            entries.append({"check": "dq_norm", "K": int(K), "gamma": float(g), "value": norm,
                            "lower": float(lower), "upper": float(upper),
                            "margin": float(min(norm - lower, upper - norm)), "passed": bool(ok)})
            min_re = float(np.linalg.eigvals(skew_backbone(int(K) - 1)).real.min())
            entries.append({"check": "skew_spectrum", "K": int(K), "gamma": float(g),
                            "value": min_re, "margin": min_re - spectrum_margin,
                            "passed": bool(min_re > spectrum_margin)})
    for M in M_values:
        gam, bound = lebesgue_constant(make_nodes(int(M))), lebesgue_bound(int(M))
        entries.append({"check": "lebesgue", "M": int(M), "value": gam, "bound": bound,
                        "margin": bound - gam, "passed": bool(gam <= bound)})
    return TheoryReport(entries=entries, passed=all(e["passed"] for e in entries))
