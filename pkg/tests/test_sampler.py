import warnings

import numpy as np
import pytest
import scipy.linalg
from hypothesis import given, settings, strategies as st

import reference as ref
from hola.algebra import build_canonical, build_plan
from hola.errors import ContractionWarning, DivergenceError, InvalidParameterError
from hola.potentials import Potential, gaussian_potential, hyperbolic_potential
from hola.sampler import (ChainState, SamplerConfig, check_contraction, picard_advance,
                          picard_step, plan_for, run_chain, run_ensemble, sample_node_noise)


def _noise(plan, d, seed=0):
    return sample_node_noise(plan, d, np.random.default_rng(seed))


def test_config_defaults():
    c = SamplerConfig(seed=1)
    assert (c.K, c.nodes, c.picard) == (3, 2, 2)
    c4 = SamplerConfig(seed=1, K=4)
    assert (c4.nodes, c4.picard) == (3, 3)
    assert SamplerConfig(seed=1, K=2).nodes == 2


@pytest.mark.parametrize("kw", [dict(seed=-1), dict(seed=1.5), dict(seed=1, K=1),
                                dict(seed=1, gamma=0.0), dict(seed=1, h=-0.1),
                                dict(seed=1, M=1), dict(seed=1, nu_star=0),
                                dict(seed=1, thin=0), dict(seed=1, chains=0),
                                dict(seed=1, n_steps=-1)])
def test_config_rejects(kw):
    with pytest.raises(InvalidParameterError):
        SamplerConfig(**kw)


def test_initial_state_shapes():
    c = SamplerConfig(seed=1, x0=np.array([1.0, 2.0]))
    np.testing.assert_array_equal(c.initial_state(2), [[1, 2], [0, 0], [0, 0]])
    with pytest.raises(InvalidParameterError):
        SamplerConfig(seed=1, x0=np.zeros(3)).initial_state(2)


@pytest.mark.parametrize("K,d", [(2, 1), (3, 2), (4, 3), (5, 2)])
def test_step_matches_dense_reference(K, d):
    p = hyperbolic_potential(d, 1.0)
    plan = build_plan(build_canonical(K, 2.0), max(K - 1, 2), 0.05)
    rng = np.random.default_rng(K * 10 + d)
    x = rng.standard_normal((K, d))
    noise = _noise(plan, d, K)
    got = picard_step(plan, p, ChainState(x), noise, 3).x
    want = ref.dense_step(K, 2.0, plan.M, 0.05, p.grad, x, noise, 3)
    np.testing.assert_allclose(got, want, rtol=1e-11, atol=1e-14)


def test_free_dynamics_is_exact_linear_step():
    # zero gradient: one sweep already gives e^{hA} x + W(1) and more sweeps change nothing
    zero = Potential(dim=2, grad=lambda x: np.zeros_like(x))
    plan = build_plan(build_canonical(3, 2.0), 2, 0.1)
    x = np.random.default_rng(0).standard_normal((3, 2))
    noise = _noise(plan, 2)
    one = picard_step(plan, zero, ChainState(x), noise, 1).x
    five = picard_step(plan, zero, ChainState(x), noise, 5).x
    np.testing.assert_array_equal(one, five)
    np.testing.assert_allclose(one, scipy.linalg.expm(0.1 * plan.ops.A) @ x + noise[-1], atol=1e-15)


def test_picard_converges_to_collocation_solution():
    # for a quadratic potential the collocation system is linear; solve it directly
    K, M, h, lam = 4, 3, 0.1, 2.0
    plan = build_plan(build_canonical(K, 2.0), M, h)
    _, _, A = ref.canonical_matrices(K, 2.0)
    c = ref.nodes(M)
    alpha = ref.alpha_quadrature(A, c, h)
    x = np.random.default_rng(5).standard_normal((K, 1))
    noise = _noise(plan, 1, 5)
    # Z_k = e^{c_k h A} x + W_k - h lam sum_j alpha_kj[:, 1] Z_j[0]
    n = M * K
    sys = np.eye(n)
    rhs = np.zeros(n)
    for k in range(M):
        rhs[k * K:(k + 1) * K] = scipy.linalg.expm(c[k] * h * A) @ x[:, 0] + noise[k, :, 0]
        for j in range(M):
            sys[k * K:(k + 1) * K, j * K] += h * lam * alpha[k, j][:, 1]
    Z = np.linalg.solve(sys, rhs).reshape(M, K)
    got = picard_advance(plan, lambda v: lam * v, x, noise, 60)
    np.testing.assert_allclose(got[:, 0], Z[-1], atol=1e-13)


def test_trace_records_geometric_contraction():
    p = gaussian_potential([1.0])
    plan = build_plan(build_canonical(3, 2.0), 2, 0.01)
    trace = []
    picard_advance(plan, p.grad, np.ones((3, 1)), _noise(plan, 1), 4, trace)
    ratios = np.array(trace[1:]) / np.array(trace[:-1])
    assert len(trace) == 4 and np.all(ratios <= 2 * 0.01 + 0.05)


def test_grad_evals_budget():
    p = gaussian_potential([1.0, 2.0])
    cfg = SamplerConfig(seed=3, K=4, h=0.02, n_steps=37, nu_star=3)
    res = run_chain(cfg, p)
    assert res.report.grad_evals == 37 * 3 * 3
    state = picard_step(plan_for(cfg), p, ChainState(np.zeros((4, 5, 2))),
                        np.zeros((3, 4, 5, 2)), 2)
    assert state.grad_evals == 2 * 3 * 5 and state.step_index == 1


def test_batched_advance_equals_per_chain():
    p = hyperbolic_potential(2, 1.0)
    plan = build_plan(build_canonical(3, 2.0), 2, 0.05)
    rng = np.random.default_rng(2)
    x = rng.standard_normal((3, 4, 2))
    noise = rng.standard_normal((2, 3, 4, 2))
    batched = picard_advance(plan, p.grad, x, noise, 2)
    for c in range(4):
        single = picard_advance(plan, p.grad, x[:, c], noise[:, :, c], 2)
        np.testing.assert_allclose(batched[:, c], single, rtol=1e-14, atol=1e-15)


def test_burn_in_and_thinning():
    cfg = SamplerConfig(seed=1, n_steps=20, burn_in=5, thin=3)
    res = run_chain(cfg, gaussian_potential([1.0]))
    np.testing.assert_array_equal(res.steps, [8, 11, 14, 17, 20])
    assert res.samples.shape == (5, 1)
    full = run_chain(cfg, gaussian_potential([1.0]), full_state=True)
    assert full.samples.shape == (5, 3, 1)
    np.testing.assert_array_equal(full.samples[:, 0], res.samples)


def test_run_chain_is_deterministic_and_chain_keyed():
    p = gaussian_potential([1.0, 4.0])
    cfg = SamplerConfig(seed=11, n_steps=600)
    a, b = run_chain(cfg, p, 0), run_chain(cfg, p, 0)
    np.testing.assert_array_equal(a.samples, b.samples)
    assert not np.array_equal(a.samples, run_chain(cfg, p, 1).samples)


def test_ensemble_independent_of_threads():
    p = hyperbolic_potential(2, 1.0)
    cfg = SamplerConfig(seed=5, n_steps=300, chains=4)
    one = run_ensemble(cfg, p, threads=1)
    many = run_ensemble(cfg, p, threads=8)
    np.testing.assert_array_equal(one.samples, many.samples)
    np.testing.assert_array_equal(one.chain_ids, np.repeat(np.arange(4), 300))
    assert one.grad_evals == 4 * 300 * 2 * 2


def test_hola_threads_env(monkeypatch):
    from hola.sampler import default_threads
    monkeypatch.setenv("HOLA_THREADS", "3")
    assert default_threads() == 3
    monkeypatch.setenv("HOLA_THREADS", "zero")
    with pytest.raises(InvalidParameterError):
        default_threads()


def test_contraction_guard():
    p = gaussian_potential([10.0])
    plan = plan_for(SamplerConfig(seed=1, h=0.05))
    with pytest.warns(ContractionWarning):
        assert check_contraction(plan, p) == pytest.approx(1.0)
    with pytest.raises(InvalidParameterError):
        check_contraction(plan, p, strict=True)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        assert check_contraction(plan, gaussian_potential([1.0])) == pytest.approx(0.1)


def test_divergence_names_step_and_node_and_keeps_partial():
    p = gaussian_potential([100.0])
    cfg = SamplerConfig(seed=1, h=1.0, n_steps=2000)
    with pytest.warns(ContractionWarning):
        with pytest.raises(DivergenceError) as info:
            run_chain(cfg, p)
    err = info.value
    assert err.step is not None and err.node is not None and 1 <= err.node <= 2
    assert err.partial.samples.shape[0] == err.step - 1
    assert err.partial.report.diverged


def test_ensemble_reports_divergence():
    cfg = SamplerConfig(seed=1, h=1.0, n_steps=2000, chains=2)
    with pytest.warns(ContractionWarning):
        res = run_ensemble(cfg, gaussian_potential([100.0]), threads=1)
    assert res.diverged and len(res.errors) == 2


def test_state_block_mismatch():
    plan = plan_for(SamplerConfig(seed=1))
    with pytest.raises(InvalidParameterError):
        picard_step(plan, gaussian_potential([1.0]), ChainState(np.zeros((2, 1))),
                    np.zeros((2, 3, 1)), 1)


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 5), st.integers(1, 3), st.integers(0, 1000))
def test_affine_in_noise(K, d, seed):
    # for a quadratic potential the step is affine in the noise vector
    plan = build_plan(build_canonical(K, 1.0), max(K - 1, 2), 0.05)
    grad = lambda v: 0.5 * v
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((K, d))
    n1, n2 = rng.standard_normal((2, plan.M, K, d))
    f = lambda n: picard_advance(plan, grad, x, n, 3)
    np.testing.assert_allclose(f(n1 + n2) - f(n2), f(n1) - f(np.zeros_like(n1)), atol=1e-12)


def test_node_noise_covariance_empirical():
    plan = build_plan(build_canonical(3, 2.0), 2, 0.2)
    z = sample_node_noise(plan, 40_000, np.random.default_rng(0)).reshape(6, -1)
    emp = np.cov(z)
    se = np.sqrt((plan.sigma_C ** 2 + np.outer(np.diag(plan.sigma_C), np.diag(plan.sigma_C)))
                 / z.shape[1])
    assert np.all(np.abs(emp - plan.sigma_C) <= 5 * se + 1e-15)
