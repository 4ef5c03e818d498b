"""K x K backbone matrices and the per-step operators built from them.

Every state-space operator of the K-th order dynamics is a K x K matrix
Kronecker-multiplied with I_d, so the code here only ever works with K x K
(or (M K) x (M K)) arrays; a K x d state matrix is acted on from the left.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from math import factorial
from typing import Sequence

import numpy as np
import scipy.linalg

from .errors import InvalidParameterError, NotPSDError

MAX_NODES = 8


@dataclass(frozen=True)
class CanonicalOperators:
    K: int
    gamma: float
    D: np.ndarray
    Q: np.ndarray
    A: np.ndarray
    J: np.ndarray

    def drift_matrix(self, lam: float) -> np.ndarray:
        """-(D+Q) diag(lam, 1, ..., 1): the full linear drift for U = lam x^2 / 2."""
        scale = np.ones(self.K)
        scale[0] = lam
        return -(self.D + self.Q) * scale[None, :]


def _backbone(K: int, gamma: float):
    D = np.zeros((K, K))
    D[-1, -1] = gamma
    Q = np.zeros((K, K))
    Q[0, 1], Q[1, 0] = -1.0, 1.0
    for i in range(1, K - 1):
        Q[i, i + 1], Q[i + 1, i] = -gamma, gamma
    J = np.diag([0.0] + [1.0] * (K - 1))
    A = -(D + Q) @ J
    return D, Q, A, J


def build_canonical(K: int, gamma: float) -> CanonicalOperators:
    if int(K) != K or K < 2:
        raise InvalidParameterError(f"order K must be an integer >= 2, got {K}")
    if not np.isfinite(gamma) or gamma <= 0:
        raise InvalidParameterError(f"gamma must be > 0, got {gamma}")
    K = int(K)
    D, Q, A, J = _backbone(K, float(gamma))
    for arr in (D, Q, A, J):
        arr.setflags(write=False)
    return CanonicalOperators(K=K, gamma=float(gamma), D=D, Q=Q, A=A, J=J)


def skew_backbone(n: int) -> np.ndarray:
    """The n x n matrix governing the auxiliary blocks once gamma is factored out.

    Tridiagonal with -1 above and +1 below the diagonal and a single 1 in the
    bottom-right corner; every eigenvalue has positive real part.
    """
    if n < 1:
        raise InvalidParameterError(f"n must be >= 1, got {n}")
    T = np.zeros((n, n))
    for i in range(n - 1):
        T[i, i + 1], T[i + 1, i] = -1.0, 1.0
    T[-1, -1] = 1.0
    return T


def expm(M) -> np.ndarray:
    """Matrix exponential (scaling and squaring with a degree-13 Pade approximant)."""
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise InvalidParameterError(f"expm needs a square matrix, got shape {M.shape}")
    if not np.all(np.isfinite(M)):
        raise InvalidParameterError("expm argument has non-finite entries")
    if not M.any():
        return np.eye(M.shape[0])
    return scipy.linalg.expm(M)


def phi_functions(M, p_max: int) -> list:
    """phi_0(M), ..., phi_{p_max}(M) from one augmented exponential.

    phi_0 = e^M and phi_k(M) = int_0^1 e^{(1-t)M} t^{k-1}/(k-1)! dt. The
    augmented matrix carries M in its leading block and identity blocks on
    the first block superdiagonal; block (0, k) of its exponential is phi_k.
    """
    M = np.asarray(M, dtype=float)
    if p_max < 0:
        raise InvalidParameterError(f"p_max must be >= 0, got {p_max}")
    n = M.shape[0]
    if p_max == 0:
        return [expm(M)]
    big = np.zeros((n * (p_max + 1), n * (p_max + 1)))
    big[:n, :n] = M
    eye = np.eye(n)
    for i in range(p_max):
        big[i * n:(i + 1) * n, (i + 1) * n:(i + 2) * n] = eye
    E = expm(big)
    return [E[:n, k * n:(k + 1) * n].copy() for k in range(p_max + 1)]


@dataclass(frozen=True)
class NodeSet:
    """Equispaced collocation nodes on [0, 1] and their Lagrange basis.

    ``basis[j, p]`` is the coefficient of sigma^p in the j-th basis polynomial.
    """

    M: int
    nodes: np.ndarray
    basis: np.ndarray

    def evaluate(self, sigma) -> np.ndarray:
        """Basis values, shape ``(len(sigma), M)``."""
        sigma = np.atleast_1d(np.asarray(sigma, dtype=float))
        powers = sigma[:, None] ** np.arange(self.M)[None, :]
        return powers @ self.basis.T

    def interpolate(self, values, sigma) -> np.ndarray:
        """Evaluate the interpolant through ``values`` (shape ``(M, ...)``) at ``sigma``."""
        values = np.asarray(values, dtype=float)
        return np.tensordot(self.evaluate(sigma), values, axes=(1, 0))


def make_nodes(M: int) -> NodeSet:
    if int(M) != M or M < 2:
        raise InvalidParameterError(f"node count M must be an integer >= 2, got {M}")
    if M > MAX_NODES:
        raise InvalidParameterError(
            f"M={M} exceeds {MAX_NODES}: equispaced monomial Lagrange basis is ill-conditioned")
    M = int(M)
    c = np.array([j / (M - 1) for j in range(M)])
    basis = np.zeros((M, M))
    for j in range(M):
        others = np.delete(c, j)
        coef = np.polynomial.polynomial.polyfromroots(others)
        basis[j] = coef / np.prod(c[j] - others)
    c.setflags(write=False)
    basis.setflags(write=False)
    return NodeSet(M=M, nodes=c, basis=basis)


def lebesgue_function(nodes: NodeSet, sigma) -> np.ndarray:
    return np.abs(nodes.evaluate(sigma)).sum(axis=1)


def lebesgue_constant(nodes: NodeSet, grid: int = 4096) -> float:
    """sup over [0, 1] of sum_j |l_j|, by dense grid plus per-interval refinement."""
    from scipy.optimize import minimize_scalar

    sig = np.linspace(0.0, 1.0, grid + 1)
    vals = lebesgue_function(nodes, sig)
    best = float(vals.max())
    c = nodes.nodes
    for a, b in zip(c[:-1], c[1:]):
        inside = (sig >= a) & (sig <= b)
        i = np.flatnonzero(inside)[np.argmax(vals[inside])]
        lo, hi = sig[max(i - 1, 0)], sig[min(i + 1, grid)]
        if hi <= lo:
            continue
        res = minimize_scalar(lambda s: -lebesgue_function(nodes, s)[0], bounds=(lo, hi),
                              method="bounded", options={"xatol": 1e-13})
        best = max(best, float(-res.fun))
    return best


def lebesgue_bound(M: int) -> float:
    """Closed-form upper bound 2^{M-1} (M-1)^{M-1} / (M-1)! for equispaced nodes."""
    return 2.0 ** (M - 1) * float(M - 1) ** (M - 1) / factorial(M - 1)


def alpha_weights(ops: CanonicalOperators, nodes: NodeSet, h: float, A=None) -> np.ndarray:
    """alpha[k, j] = int_0^{c_k} e^{(c_k - s) h A} l_j(s) ds, shape ``(M, M, n, n)``.

    Expanding l_j in monomials, each term is
    int_0^tau e^{(tau-s)hA} s^p ds = tau^{p+1} p! phi_{p+1}(tau h A).
    ``A`` overrides the drift generator (the dense Kronecker oracle uses this).
    """
    if not h > 0:
        raise InvalidParameterError(f"step size h must be > 0, got {h}")
    A = ops.A if A is None else np.asarray(A, dtype=float)
    n, M = A.shape[0], nodes.M
    alpha = np.zeros((M, M, n, n))
    for k, ck in enumerate(nodes.nodes):
        if ck == 0.0:
            continue
        phis = phi_functions(ck * h * A, M)
        for p in range(M):
            term = ck ** (p + 1) * factorial(p) * phis[p + 1]
            for j in range(M):
                alpha[k, j] += nodes.basis[j, p] * term
    return alpha


def diffusion_cross_covariance(P1, P2, D, t: float) -> np.ndarray:
    """2 int_0^t e^{u P1} D e^{u P2^T} du via one Van Loan exponential."""
    P1, P2, D = (np.atleast_2d(np.asarray(a, dtype=float)) for a in (P1, P2, D))
    if t == 0.0:
        return np.zeros((P1.shape[0], P2.shape[0]))
    n1, n2 = P1.shape[0], P2.shape[0]
    big = np.zeros((n1 + n2, n1 + n2))
    big[:n1, :n1] = -P1
    big[:n1, n1:] = 2.0 * D
    big[n1:, n1:] = P2.T
    E = expm(big * t)
    # E[:n1, n1:] = int_0^t e^{-(t-u) P1} 2D e^{u P2^T} du
    return expm(t * P1) @ E[:n1, n1:]


def joint_noise_covariance(blocks: Sequence, D) -> np.ndarray:
    """Covariance of int_0^{t_i} e^{(t_i - s) P_i} sqrt(2D) dB_s over all blocks i.

    ``blocks`` is a sequence of ``(P_i, t_i)`` pairs driven by one shared
    Brownian path. Block (i, j) is e^{(t_i-m)P_i} C_ij(m) e^{(t_j-m)P_j}^T with
    m = min(t_i, t_j) and C_ij the cross covariance up to m.
    """
    D = np.atleast_2d(np.asarray(D, dtype=float))
    mats = [np.atleast_2d(np.asarray(P, dtype=float)) for P, _ in blocks]
    times = [float(t) for _, t in blocks]
    sizes = [P.shape[0] for P in mats]
    offs = np.concatenate([[0], np.cumsum(sizes)])
    S = np.zeros((offs[-1], offs[-1]))
    for i, (Pi, ti) in enumerate(zip(mats, times)):
        for j in range(i, len(mats)):
            Pj, tj = mats[j], times[j]
            m = min(ti, tj)
            blk = diffusion_cross_covariance(Pi, Pj, D, m)
            if ti > m:
                blk = expm((ti - m) * Pi) @ blk
            if tj > m:
                blk = blk @ expm((tj - m) * Pj).T
            if i == j:
                blk = 0.5 * (blk + blk.T)
            S[offs[i]:offs[i + 1], offs[j]:offs[j + 1]] = blk
            S[offs[j]:offs[j + 1], offs[i]:offs[i + 1]] = blk.T
    return S


def noise_covariance(ops: CanonicalOperators, nodes: NodeSet, h: float, D=None) -> np.ndarray:
    """Joint covariance Sigma_C of (W(c_1), ..., W(c_M)), shape ``(M K, M K)``."""
    if not h > 0:
        raise InvalidParameterError(f"step size h must be > 0, got {h}")
    D = ops.D if D is None else D
    return joint_noise_covariance([(ops.A, c * h) for c in nodes.nodes], D)


def factor_covariance(sigma, sym_tol: float = 1e-10, psd_tol: float = 1e-8) -> np.ndarray:
    """Square factor F with F F^T = sigma for a PSD, possibly singular, sigma.

    Rows/columns that are exactly zero stay exactly zero in F. The rest is
    equilibrated to unit diagonal before the symmetric eigendecomposition so
    that tiny-variance components keep their relative accuracy; negative
    round-off eigenvalues are clipped.
    """
    S = np.asarray(sigma, dtype=float)
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise InvalidParameterError(f"covariance must be square, got shape {S.shape}")
    scale = max(1.0, float(np.max(np.abs(S)))) if S.size else 1.0
    if np.max(np.abs(S - S.T), initial=0.0) > sym_tol * scale:
        raise InvalidParameterError("covariance is not symmetric")
    n = S.shape[0]
    F = np.zeros((n, n))
    diag = np.diag(S).copy()
    if np.any(diag < 0):
        raise NotPSDError(f"negative variance on the diagonal: {diag.min():.3e}")
    active = np.flatnonzero(np.any(S != 0.0, axis=1))
    if active.size == 0:
        return F
    sub = 0.5 * (S[np.ix_(active, active)] + S[np.ix_(active, active)].T)
    d = np.sqrt(np.diag(sub))
    if np.any(d == 0):
        raise NotPSDError("zero variance with non-zero covariance")
    corr = sub / np.outer(d, d)
    w, V = np.linalg.eigh(corr)
    if w.min() < -psd_tol * max(w.max(), 1.0):
        raise NotPSDError(f"covariance has eigenvalue {w.min():.3e} (max {w.max():.3e})")
    root = (V * np.sqrt(np.clip(w, 0.0, None))) @ V.T
    F[np.ix_(active, active)] = d[:, None] * root
    return F


@dataclass(frozen=True)
class StepPlan:
    """Everything one outer step needs, precomputed once per (K, gamma, M, h).

    ``exp_stack`` stacks e^{c_k h A} into an ``(M K, K)`` matrix and
    ``drift_cols[k K + r, j]`` is column 2 of alpha_j(c_k, h) (row r), which
    is all the step needs because the nonlinear drift only enters block 2.
    """

    ops: CanonicalOperators
    nodes: NodeSet
    h: float
    exp_at_nodes: np.ndarray
    alpha: np.ndarray
    sigma_C: np.ndarray
    noise_factor: np.ndarray
    exp_stack: np.ndarray = field(init=False, repr=False)
    drift_cols: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        K, M = self.ops.K, self.nodes.M
        exp_stack = self.exp_at_nodes.reshape(M * K, K)
        drift_cols = self.alpha[:, :, :, 1].transpose(0, 2, 1).reshape(M * K, M)
        for arr in (self.exp_at_nodes, self.alpha, self.sigma_C, self.noise_factor,
                    exp_stack, drift_cols):
            arr.setflags(write=False)
        object.__setattr__(self, "exp_stack", exp_stack)
        object.__setattr__(self, "drift_cols", drift_cols)

    @property
    def K(self) -> int:
        return self.ops.K

    @property
    def M(self) -> int:
        return self.nodes.M

    def contraction_factor(self, L: float) -> float:
        """2 L h Gamma, the Picard contraction bound for an L-smooth potential."""
        return 2.0 * L * self.h * lebesgue_constant(self.nodes)


def build_plan(ops: CanonicalOperators, M: int, h: float) -> StepPlan:
    if not (np.isfinite(h) and h > 0):
        raise InvalidParameterError(f"step size h must be > 0, got {h}")
    nodes = make_nodes(M)
    exps = np.stack([expm(c * h * ops.A) for c in nodes.nodes])
    alpha = alpha_weights(ops, nodes, h)
    sigma = noise_covariance(ops, nodes, h)
    return StepPlan(ops=ops, nodes=nodes, h=float(h), exp_at_nodes=exps, alpha=alpha,
                    sigma_C=sigma, noise_factor=factor_covariance(sigma))


def plan_to_dict(plan: StepPlan) -> dict:
    """JSON-friendly dump of a plan's canonical matrices."""
    ops = plan.ops
    return {
        "K": ops.K,
        "gamma": ops.gamma,
        "M": plan.M,
        "h": plan.h,
        "nodes": plan.nodes.nodes.tolist(),
        "D_can": ops.D.tolist(),
        "Q_can": ops.Q.tolist(),
        "A_can": ops.A.tolist(),
        "lagrange_basis": plan.nodes.basis.tolist(),
        "lebesgue_constant": lebesgue_constant(plan.nodes),
        "exp_at_nodes": plan.exp_at_nodes.tolist(),
        "alpha": plan.alpha.tolist(),
        "sigma_C": plan.sigma_C.tolist(),
        "noise_factor": plan.noise_factor.tolist(),
    }
