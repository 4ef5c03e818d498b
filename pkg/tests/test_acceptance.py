"""End-to-end acceptance checks, one test per criterion.

Each test records a one-line PASS/FAIL verdict that is printed in the
"acceptance criteria" section at the end of the pytest run.
"""

import numpy as np
import pytest

import reference as ref
from hola.algebra import alpha_weights, build_canonical, build_plan, make_nodes, noise_covariance
from hola.cli import main
from hola.diagnostics import (gaussian_w2, interpolation_order_check, order_sweep, picard_probe,
                              stationary_moment_check, sweep_point)
from hola.potentials import gaussian_potential, hyperbolic_potential
from hola.sampler import ChainState, SamplerConfig, picard_step, run_ensemble, sample_node_noise


def test_1_fast_path_matches_dense_reference(acceptance):
    worst = 0.0
    rng = np.random.default_rng(2024)
    for K in (2, 3, 4):
        for d in (1, 2, 3):
            cfg = SamplerConfig(seed=0, K=K, gamma=2.0, h=0.05)
            plan = build_plan(build_canonical(K, 2.0), cfg.nodes, 0.05)
            p = hyperbolic_potential(d, 1.0)
            x = rng.standard_normal((K, d))
            noise = sample_node_noise(plan, d, rng)
            fast = picard_step(plan, p, ChainState(x), noise, cfg.picard).x
            dense = ref.dense_step(K, 2.0, cfg.nodes, 0.05, p.grad, x, noise, cfg.picard)
            worst = max(worst, np.abs(fast - dense).max() / np.abs(dense).max())
    ok = acceptance(1, worst <= 1e-10, f"max relative deviation {worst:.2e} (tol 1e-10)")
    assert ok


def test_2_alpha_and_noise_covariance_match_quadrature(acceptance):
    worst_a = worst_s = 0.0
    for K in (3, 4, 5):
        M = K - 1
        for gamma in (1.0, 2.0):
            D, _, A = ref.canonical_matrices(K, gamma)
            ops, nodes = build_canonical(K, gamma), make_nodes(M)
            for h in (0.01, 0.1):
                alpha = alpha_weights(ops, nodes, h)
                sigma = noise_covariance(ops, nodes, h)
                worst_a = max(worst_a, np.abs(alpha - ref.alpha_quadrature(A, ref.nodes(M), h)).max())
                worst_s = max(worst_s, np.abs(sigma - ref.noise_cov_quadrature(A, D, ref.nodes(M), h)).max())
    ok = acceptance(2, max(worst_a, worst_s) <= 1e-9,
                    f"alpha max dev {worst_a:.2e}, Sigma_C max dev {worst_s:.2e} (tol 1e-9)")
    assert ok


def test_3_stationary_law_recovery(acceptance):
    p = gaussian_potential([1.0, 4.0])
    cfg = SamplerConfig(seed=3, K=3, M=2, nu_star=2, gamma=2.0, h=0.05, n_steps=200_000,
                        burn_in=20_000, chains=4)
    res = run_ensemble(cfg, p)
    assert not res.diverged
    x = res.samples
    w2 = gaussian_w2(x.mean(axis=0), np.cov(x, rowvar=False), np.zeros(2), np.diag([1.0, 0.25]))
    ok = acceptance(3, w2 <= 0.05, f"W2 to N(0, diag(1, 0.25)) = {w2:.4f} over {len(x)} samples (tol 0.05)")
    assert ok


def test_4_picard_contraction(acceptance):
    plan = build_plan(build_canonical(3, 2.0), 2, 0.01)
    probe = picard_probe(plan, gaussian_potential([1.0]), 50, nu_star=4, seed=4)
    limit = probe.bound + 0.05
    ok = acceptance(4, probe.max_ratio <= limit,
                    f"max sweep ratio {probe.max_ratio:.4f} <= 2LhGamma + 0.05 = {limit:.4f}")
    assert ok


def test_5_interpolation_order(acceptance):
    hs = [0.1, 0.05, 0.025, 0.0125]
    curves = {"sin": np.sin, "exp": np.exp,
              "sin+exp": lambda t: np.stack([np.sin(2 * t), np.exp(-t)], axis=-1)}
    slopes = {}
    for M in (2, 3):
        for name, f in curves.items():
            slopes[(M, name)] = interpolation_order_check(f, M, hs, t0=1.0).slope
    dev = max(abs(s - M) for (M, _), s in slopes.items())
    detail = ", ".join(f"M={M} {n}: {s:.3f}" for (M, n), s in slopes.items())
    ok = acceptance(5, dev <= 0.15, f"slopes {detail} (tol 0.15)")
    assert ok


@pytest.mark.slow
def test_6_discretization_bias_ordering(acceptance):
    p = gaussian_potential([1.0, 1.0])
    hs = [0.2, 0.1, 0.05, 0.025]
    T, chains = 2000.0, 16
    cfg = SamplerConfig(seed=6, K=3, gamma=2.0)
    exact = order_sweep(p, cfg, hs, "exact-gaussian", T=T, chains=chains)
    ula = order_sweep(p, cfg, hs, "ula", T=T, chains=chains)
    hola = order_sweep(p, cfg, hs, "hola", T=T, chains=chains)
    # same gradient budget: nu* M = 4 ULA steps per hola step over the same time
    h_match = hs[-1] / (cfg.picard * cfg.nodes)
    matched = sweep_point(p, cfg, h_match, "ula", T=T, chains=chains, stream_key=len(hs))
    ula_err = matched.error(np.zeros(2), np.eye(2), "coupled")
    budget_equal = matched.grad_evals == hola.grad_evals[-1]

    a = abs(exact.fitted_slope) < 0.3
    b = abs(ula.fitted_slope - 1.0) <= 0.3
    c = hola.fitted_slope >= 1.0 and hola.errors[-1] < ula_err and budget_equal
    detail = (f"(a) exact slope {exact.fitted_slope:+.3f}; (b) ULA slope {ula.fitted_slope:.3f}; "
              f"(c) hola slope {hola.fitted_slope:.3f}, err {hola.errors[-1]:.2e} at h=0.025 vs "
              f"ULA {ula_err:.2e} at h={h_match} ({hola.grad_evals[-1]} gradients each)")
    ok = acceptance(6, a and b and c, detail)
    assert ok


def test_7_stationary_moment_bounds(acceptance):
    results = {}
    for name, p in (("gaussian", gaussian_potential([1.0] * 4)),
                    ("hyperbolic", hyperbolic_potential(4, 1.0))):
        cfg = SamplerConfig(seed=7, K=3, gamma=2.0, h=0.05, n_steps=40_000, burn_in=4_000,
                            chains=4)
        results[name] = stationary_moment_check(run_ensemble(cfg, p).samples, p)
    detail = "; ".join(
        f"{n}: E|x|^2={r.second_moment:.3f}/{r.second_moment_bound:g}, "
        f"E|grad|^2={r.grad_moment:.3f}/{r.grad_moment_bound:g}"
        for n, r in results.items())
    ok = acceptance(7, all(r.passed for r in results.values()), detail)
    assert ok


def test_8_theory_checks_command(acceptance, tmp_path):
    code = main(["check", "--orders", "3-8", "--gammas", "0.5,1,2,5", "--node-counts", "2-6",
                 "--out", str(tmp_path / "check.json")])
    ok = acceptance(8, code == 0, f"hola check exit code {code}")
    assert ok


def test_9_determinism(acceptance, tmp_path, monkeypatch):
    args = ["run", "--seed", "99", "--potential", "hyperbolic", "--dim", "3", "--chains", "8",
            "--steps", "500", "--burnin", "50"]
    blobs = []
    for i, threads in enumerate(("1", "1", "8")):
        monkeypatch.setenv("HOLA_THREADS", threads)
        out = tmp_path / f"run{i}.csv"
        assert main(args + ["--out", str(out)]) == 0
        blobs.append(out.read_bytes())
    same_runs, same_threads = blobs[0] == blobs[1], blobs[0] == blobs[2]
    ok = acceptance(9, same_runs and same_threads,
                    f"rerun identical: {same_runs}; threads 1 vs 8 identical: {same_threads}")
    assert ok
