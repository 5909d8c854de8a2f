"""Unit tests for the single-step rules and the reference sequential scan."""

import math

import numpy as np
import pytest

from palimpsa import (
    DomainError,
    DualState,
    HeadParams,
    INFINITE_WINDOW,
    MesaState,
    NumericError,
    RuleContractError,
    RuleKind,
    StepInput,
    alpha_from_step,
    deltanet_step,
    gated_deltanet_step,
    longhorn_step,
    mamba2_limit_step,
    memory_window,
    mesa_step,
    palimpsa_step,
    readout,
    sequential_scan,
)
from palimpsa.oracles import (
    deltanet_transcription,
    longhorn_transcription,
    mamba2_limit_unrolled,
    mesa_sherman_morrison,
    palimpsa_unrolled,
    readout_naive,
)

# Frozen via oracles.exp_neg_extended(0.15) at 50-digit working precision.
ALPHA_A005_D3 = "0.860707976425058"


def random_inputs(rng, T, d_k, d_v, beta_scale=1.0, scalar_beta=False, d_max=0.5):
    out = []
    for _ in range(T):
        if scalar_beta:
            beta = np.full(d_v, float(rng.uniform(0.0, beta_scale)))
        else:
            beta = rng.uniform(0.0, beta_scale, size=d_v)
        out.append(
            StepInput(
                k=rng.standard_normal(d_k),
                v=rng.standard_normal(d_v),
                q=rng.standard_normal(d_k),
                beta=beta,
                d=float(rng.uniform(0.0, d_max)),
            )
        )
    return out


# ---------- alpha and the memory window ----------


def test_alpha_trivial_cases():
    assert alpha_from_step(0.0, 5.0) == 1.0
    assert alpha_from_step(3.0, 0.0) == 1.0
    assert alpha_from_step(0.0, 0.0) == 1.0


def test_alpha_halving():
    alpha = alpha_from_step(1.0, math.log(2.0))
    assert abs(alpha - 0.5) < 1e-15
    assert abs(memory_window(alpha) - 2.0) < 1e-12


def test_alpha_frozen_value():
    # 15 significant digits pinned by the extended-precision oracle
    got = alpha_from_step(0.05, 3.0)
    assert f"{got:.15g}" == ALPHA_A005_D3


def test_alpha_domain_errors():
    with pytest.raises(DomainError):
        alpha_from_step(-0.1, 1.0)
    with pytest.raises(DomainError):
        alpha_from_step(0.1, -1.0)
    with pytest.raises(DomainError):
        alpha_from_step(float("nan"), 1.0)


def test_memory_window_sentinel():
    assert memory_window(1.0) == INFINITE_WINDOW
    with pytest.raises(DomainError):
        memory_window(0.0)
    with pytest.raises(DomainError):
        memory_window(1.5)


# ---------- dual-state rule ----------


def test_palimpsa_noop_when_beta_zero_and_alpha_one():
    hp = HeadParams(d_k=3, d_v=2, decay_rate=0.0, prior_precision=1.0)
    rng = np.random.default_rng(0)
    state = DualState(mu=rng.standard_normal((2, 3)), imp=rng.uniform(1.0, 3.0, (2, 3)))
    inp = StepInput(k=rng.standard_normal(3), v=rng.standard_normal(2), q=np.zeros(3), beta=np.zeros(2), d=0.0)
    new = palimpsa_step(state, inp, hp)
    np.testing.assert_array_equal(new.mu, state.mu)
    np.testing.assert_array_equal(new.imp, state.imp)


def test_palimpsa_single_step_substitution():
    # d_v=1, d_k=2, I_prior=1, rest mean, imp=(1,1), k=(1,0), v=(2,), beta=1, alpha=1:
    # imp' = (2, 1); mu' = (1, 0)
    hp = HeadParams(d_k=2, d_v=1, decay_rate=0.0, prior_precision=1.0)
    state = DualState(mu=np.zeros((1, 2)), imp=np.ones((1, 2)))
    inp = StepInput(k=np.array([1.0, 0.0]), v=np.array([2.0]), q=np.zeros(2), beta=np.array([1.0]), d=0.0)
    new = palimpsa_step(state, inp, hp)
    np.testing.assert_allclose(new.imp, [[2.0, 1.0]], rtol=0, atol=0)
    np.testing.assert_allclose(new.mu, [[1.0, 0.0]], rtol=0, atol=0)


def test_palimpsa_matches_unrolled_batch_oracle():
    rng = np.random.default_rng(7)
    hp = HeadParams(d_k=4, d_v=3, decay_rate=0.3, prior_precision=0.7)
    inputs = random_inputs(rng, 8, 4, 3)
    init = DualState(mu=rng.standard_normal((3, 4)), imp=rng.uniform(0.8, 2.0, (3, 4)))
    state = init
    for inp in inputs:
        state = palimpsa_step(state, inp, hp)
    oracle = palimpsa_unrolled(inputs, init, hp)
    np.testing.assert_allclose(state.imp, oracle.imp, rtol=0, atol=1e-12)
    np.testing.assert_allclose(state.mu, oracle.mu, rtol=0, atol=1e-12)


def test_palimpsa_importance_floor():
    # From rest, imp can never drop below the prior precision.
    rng = np.random.default_rng(11)
    for trial in range(20):
        hp = HeadParams(d_k=3, d_v=2, decay_rate=float(rng.uniform(0, 2)), prior_precision=float(rng.uniform(0.2, 3)))
        state = DualState.rest(hp)
        for inp in random_inputs(rng, 30, 3, 2, beta_scale=2.0, d_max=2.0):
            state = palimpsa_step(state, inp, hp)
            assert np.all(state.imp >= hp.prior_precision - 1e-12)


def test_palimpsa_importance_monotone_without_data():
    # beta = 0: imp relaxes toward the prior from either side, never crossing.
    hp = HeadParams(d_k=2, d_v=1, decay_rate=1.0, prior_precision=1.0)
    state = DualState(mu=np.zeros((1, 2)), imp=np.array([[4.0, 0.25]]))
    prev = state.imp.copy()
    for _ in range(10):
        inp = StepInput(k=np.zeros(2), v=np.zeros(1), q=np.zeros(2), beta=np.zeros(1), d=0.5)
        state = palimpsa_step(state, inp, hp)
        assert state.imp[0, 0] <= prev[0, 0] and state.imp[0, 0] >= 1.0
        assert state.imp[0, 1] >= prev[0, 1] and state.imp[0, 1] <= 1.0
        prev = state.imp.copy()


# ---------- pinned-importance limit rule ----------


def test_mamba2_limit_keeps_imp_fixed():
    hp = HeadParams(d_k=3, d_v=2, decay_rate=0.5, prior_precision=1.5)
    rng = np.random.default_rng(3)
    state = DualState.rest(hp)
    for inp in random_inputs(rng, 10, 3, 2):
        state = mamba2_limit_step(state, inp, hp)
        np.testing.assert_array_equal(state.imp, np.full((2, 3), 1.5))


def test_mamba2_limit_pure_decay():
    hp = HeadParams(d_k=2, d_v=1, decay_rate=1.0, prior_precision=1.0)
    state = DualState(mu=np.array([[2.0, -4.0]]), imp=np.ones((1, 2)))
    inp = StepInput(k=np.zeros(2), v=np.zeros(1), q=np.zeros(2), beta=np.zeros(1), d=math.log(2.0))
    new = mamba2_limit_step(state, inp, hp)
    np.testing.assert_allclose(new.mu, [[1.0, -2.0]], atol=1e-15)


def test_mamba2_limit_matches_unrolled():
    rng = np.random.default_rng(5)
    hp = HeadParams(d_k=3, d_v=4, decay_rate=0.2, prior_precision=2.0)
    inputs = random_inputs(rng, 12, 3, 4)
    init = DualState(mu=rng.standard_normal((4, 3)), imp=np.full((4, 3), 2.0))
    state = init
    for inp in inputs:
        state = mamba2_limit_step(state, inp, hp)
    oracle = mamba2_limit_unrolled(inputs, init, hp)
    np.testing.assert_allclose(state.mu, oracle.mu, rtol=0, atol=1e-12)


def _limit_gap(s: float, seed: int = 42, T: int = 32) -> float:
    """Max-norm distance between the dual rule and its pinned-importance limit
    when beta is scaled by s and v by 1/s (written product held fixed)."""
    rng = np.random.default_rng(seed)
    hp = HeadParams(d_k=4, d_v=3, decay_rate=0.4, prior_precision=1.0)
    base = random_inputs(rng, T, 4, 3, beta_scale=1.0, d_max=0.3)
    sp = DualState.rest(hp)
    sm = DualState.rest(hp)
    for inp in base:
        scaled = StepInput(k=inp.k, v=inp.v / s, q=inp.q, beta=inp.beta * s, d=inp.d)
        sp = palimpsa_step(sp, scaled, hp)
        sm = mamba2_limit_step(sm, scaled, hp)
    return float(np.max(np.abs(sp.mu - sm.mu)))


def test_limit_gap_shrinks_one_decade_per_decade():
    gaps = {s: _limit_gap(s) for s in (1e-2, 1e-3, 1e-4)}
    r1 = gaps[1e-2] / gaps[1e-3]
    r2 = gaps[1e-3] / gaps[1e-4]
    assert 8.0 <= r1 <= 12.0, r1
    assert 8.0 <= r2 <= 12.0, r2


# ---------- delta rules ----------


def test_deltanet_writes_on_empty_state():
    inp = StepInput(k=np.array([1.0, 0.0]), v=np.array([3.0]), q=np.zeros(2), beta=np.array([1.0]))
    out = deltanet_step(np.zeros((1, 2)), inp)
    np.testing.assert_allclose(out, [[3.0, 0.0]], atol=0)


def test_deltanet_orthogonal_write_keeps_row():
    # Stored (1, 0) direction is untouched by a write along (0, 1).
    inp = StepInput(k=np.array([0.0, 1.0]), v=np.array([3.0]), q=np.zeros(2), beta=np.array([1.0]))
    out = deltanet_step(np.array([[1.0, 0.0]]), inp)
    np.testing.assert_allclose(out, [[1.0, 3.0]], atol=0)


def test_deltanet_beta_zero_noop():
    rng = np.random.default_rng(1)
    mu = rng.standard_normal((2, 3))
    inp = StepInput(k=rng.standard_normal(3), v=rng.standard_normal(2), q=np.zeros(3), beta=np.zeros(2))
    np.testing.assert_array_equal(deltanet_step(mu, inp), mu)


def test_deltanet_matches_transcription():
    rng = np.random.default_rng(9)
    mu = rng.standard_normal((3, 4))
    for _ in range(10):
        inp = random_inputs(rng, 1, 4, 3, scalar_beta=True)[0]
        got = deltanet_step(mu, inp)
        np.testing.assert_allclose(got, deltanet_transcription(mu, inp), rtol=0, atol=1e-14)
        mu = got


def test_gated_deltanet_reduces_to_deltanet_at_alpha_one():
    rng = np.random.default_rng(13)
    hp = HeadParams(d_k=4, d_v=3, decay_rate=0.0)
    mu_g = rng.standard_normal((3, 4))
    mu_d = mu_g.copy()
    for inp in random_inputs(rng, 64, 4, 3, scalar_beta=True):
        mu_g = gated_deltanet_step(mu_g, inp, hp)
        mu_d = deltanet_step(mu_d, inp)
        np.testing.assert_allclose(mu_g, mu_d, rtol=0, atol=1e-15)


def test_gated_deltanet_beta_zero_is_pure_decay():
    hp = HeadParams(d_k=2, d_v=1, decay_rate=1.0)
    mu = np.array([[2.0, 6.0]])
    inp = StepInput(k=np.ones(2), v=np.ones(1), q=np.zeros(2), beta=np.zeros(1), d=math.log(2.0))
    np.testing.assert_allclose(gated_deltanet_step(mu, inp, hp), [[1.0, 3.0]], atol=1e-15)


def test_gated_deltanet_matches_transcription():
    rng = np.random.default_rng(17)
    hp = HeadParams(d_k=3, d_v=2, decay_rate=0.6)
    mu = rng.standard_normal((2, 3))
    for inp in random_inputs(rng, 8, 3, 2, scalar_beta=True):
        alpha = alpha_from_step(hp.decay_rate, inp.d)
        got = gated_deltanet_step(mu, inp, hp)
        np.testing.assert_allclose(got, deltanet_transcription(mu, inp, alpha=alpha), rtol=0, atol=1e-14)
        mu = got


def test_scalar_beta_rules_reject_mixed_vectors():
    hp = HeadParams(d_k=2, d_v=2, decay_rate=0.1)
    inp = StepInput(k=np.ones(2), v=np.ones(2), q=np.zeros(2), beta=np.array([0.5, 0.6]), d=0.1)
    with pytest.raises(RuleContractError):
        deltanet_step(np.zeros((2, 2)), inp)
    with pytest.raises(RuleContractError):
        gated_deltanet_step(np.zeros((2, 2)), inp, hp)
    with pytest.raises(RuleContractError):
        mesa_step(MesaState.rest(hp), inp, hp)


# ---------- implicit online rule ----------


def test_longhorn_write_on_empty_state():
    # mu=0, k=(1,0), v=(2,), beta=(2,): row = (beta v/(1+beta k.k)) k = (4/3, 0)
    inp = StepInput(k=np.array([1.0, 0.0]), v=np.array([2.0]), q=np.zeros(2), beta=np.array([2.0]))
    out = longhorn_step(np.zeros((1, 2)), inp)
    np.testing.assert_allclose(out, [[4.0 / 3.0, 0.0]], rtol=0, atol=1e-15)


def test_longhorn_beta_zero_noop():
    rng = np.random.default_rng(2)
    mu = rng.standard_normal((2, 3))
    inp = StepInput(k=rng.standard_normal(3), v=rng.standard_normal(2), q=np.zeros(3), beta=np.zeros(2))
    np.testing.assert_array_equal(longhorn_step(mu, inp), mu)


def test_longhorn_ignores_step_size():
    rng = np.random.default_rng(4)
    mu = rng.standard_normal((2, 3))
    base = random_inputs(rng, 1, 3, 2)[0]
    alt = StepInput(k=base.k, v=base.v, q=base.q, beta=base.beta, d=base.d + 5.0)
    np.testing.assert_array_equal(longhorn_step(mu, base), longhorn_step(mu, alt))


def test_longhorn_matches_transcription():
    rng = np.random.default_rng(21)
    mu = rng.standard_normal((3, 5))
    for inp in random_inputs(rng, 10, 5, 3, beta_scale=2.0):
        got = longhorn_step(mu, inp)
        np.testing.assert_allclose(got, longhorn_transcription(mu, inp), rtol=0, atol=1e-14)
        mu = got


# ---------- full-precision rule ----------


def test_mesa_noop_when_beta_zero_alpha_one():
    hp = HeadParams(d_k=3, d_v=2, decay_rate=0.0, prior_precision=1.0)
    rng = np.random.default_rng(6)
    state = MesaState(mu=rng.standard_normal((2, 3)), prec=np.eye(3) * 2.0)
    inp = StepInput(k=rng.standard_normal(3), v=rng.standard_normal(2), q=np.zeros(3), beta=np.zeros(2), d=0.0)
    new = mesa_step(state, inp, hp)
    np.testing.assert_allclose(new.prec, state.prec, atol=1e-15)
    np.testing.assert_allclose(new.mu, state.mu, atol=1e-12)


def test_mesa_first_step_from_rest():
    # prec' = I + k k^T; mu' rows solve (I + k k^T) mu' = v_i k
    hp = HeadParams(d_k=2, d_v=1, decay_rate=0.0, prior_precision=1.0)
    state = MesaState.rest(hp)
    inp = StepInput(k=np.array([1.0, 0.0]), v=np.array([2.0]), q=np.zeros(2), beta=np.array([1.0]), d=0.0)
    new = mesa_step(state, inp, hp)
    np.testing.assert_allclose(new.prec, [[2.0, 0.0], [0.0, 1.0]], atol=1e-15)
    np.testing.assert_allclose(new.mu, [[1.0, 0.0]], atol=1e-15)


def test_mesa_direct_solve_matches_sherman_morrison():
    rng = np.random.default_rng(23)
    hp = HeadParams(d_k=8, d_v=4, decay_rate=0.3, prior_precision=1.0)
    inputs = random_inputs(rng, 64, 8, 4, scalar_beta=True, d_max=0.4)
    init = MesaState.rest(hp)
    state = init
    for inp in inputs:
        state = mesa_step(state, inp, hp)
    oracle = mesa_sherman_morrison(inputs, init, hp)
    np.testing.assert_allclose(state.prec, oracle.prec, rtol=0, atol=1e-8)
    np.testing.assert_allclose(state.mu, oracle.mu, rtol=0, atol=1e-8)


# ---------- readout ----------


def test_readout_identity_memory():
    q = np.array([1.0, -2.0, 3.0])
    np.testing.assert_array_equal(readout(np.eye(3), q), q)


def test_readout_matches_naive_loop():
    rng = np.random.default_rng(8)
    mu = rng.standard_normal((4, 6))
    q = rng.standard_normal(6)
    np.testing.assert_allclose(readout(mu, q), readout_naive(mu, q), rtol=0, atol=1e-14)


def test_readout_linear_in_query():
    rng = np.random.default_rng(10)
    mu = rng.standard_normal((3, 4))
    q1, q2 = rng.standard_normal(4), rng.standard_normal(4)
    lhs = readout(mu, 2.0 * q1 + 0.5 * q2)
    rhs = 2.0 * readout(mu, q1) + 0.5 * readout(mu, q2)
    np.testing.assert_allclose(lhs, rhs, atol=1e-13)


# ---------- sequential scan ----------


def test_sequential_scan_empty():
    hp = HeadParams(d_k=2, d_v=2)
    res = sequential_scan(RuleKind.PALIMPSA, DualState.rest(hp), [], hp)
    assert res.outputs.shape == (0, 2)
    np.testing.assert_array_equal(res.final.mu, np.zeros((2, 2)))


def test_sequential_scan_single_step_matches_rule():
    hp = HeadParams(d_k=3, d_v=2, decay_rate=0.2)
    rng = np.random.default_rng(12)
    inp = random_inputs(rng, 1, 3, 2)[0]
    res = sequential_scan(RuleKind.PALIMPSA, DualState.rest(hp), [inp], hp)
    direct = palimpsa_step(DualState.rest(hp), inp, hp)
    np.testing.assert_array_equal(res.final.mu, direct.mu)
    np.testing.assert_array_equal(res.outputs[0], direct.mu @ inp.q)


def test_sequential_scan_long_run_matches_batch_oracle():
    rng = np.random.default_rng(14)
    hp = HeadParams(d_k=4, d_v=3, decay_rate=0.15, prior_precision=1.3)
    inputs = random_inputs(rng, 100, 4, 3, d_max=0.2)
    init = DualState.rest(hp)
    res = sequential_scan(RuleKind.PALIMPSA, init, inputs, hp)
    oracle = palimpsa_unrolled(inputs, init, hp)
    np.testing.assert_allclose(res.final.imp, oracle.imp, rtol=0, atol=1e-11)
    np.testing.assert_allclose(res.final.mu, oracle.mu, rtol=0, atol=1e-11)


def test_sequential_scan_trace_opt_in():
    rng = np.random.default_rng(15)
    hp = HeadParams(d_k=2, d_v=2, decay_rate=0.1)
    inputs = random_inputs(rng, 5, 2, 2)
    res = sequential_scan(RuleKind.PALIMPSA, DualState.rest(hp), inputs, hp, keep_trace=True)
    assert len(res.trace) == 5
    np.testing.assert_array_equal(res.trace[-1].mu, res.final.mu)
    bare = sequential_scan(RuleKind.PALIMPSA, DualState.rest(hp), inputs, hp)
    assert bare.trace == []


def test_sequential_scan_mesa_and_matrix_rules_run():
    rng = np.random.default_rng(16)
    hp = HeadParams(d_k=3, d_v=2, decay_rate=0.2)
    inputs = random_inputs(rng, 6, 3, 2, scalar_beta=True)
    for rule, init in [
        (RuleKind.DELTANET, np.zeros((2, 3))),
        (RuleKind.GATED_DELTANET, np.zeros((2, 3))),
        (RuleKind.LONGHORN, np.zeros((2, 3))),
        (RuleKind.MESA, MesaState.rest(hp)),
    ]:
        res = sequential_scan(rule, init, inputs, hp)
        assert res.outputs.shape == (6, 2)
        assert np.isfinite(res.outputs).all()


def test_sequential_scan_rejects_wrong_state_type():
    hp = HeadParams(d_k=2, d_v=2)
    with pytest.raises(RuleContractError):
        sequential_scan(RuleKind.PALIMPSA, np.zeros((2, 2)), [], hp)
    with pytest.raises(RuleContractError):
        sequential_scan(RuleKind.MESA, DualState.rest(hp), [], hp)


@pytest.mark.filterwarnings("ignore:overflow")
def test_sequential_scan_reports_step_index_on_numeric_error():
    # Huge decay with a huge step drives alpha to 0; make mu blow up instead
    # via an overflowing value write at step 2.
    hp = HeadParams(d_k=2, d_v=1, decay_rate=0.0, prior_precision=1e-300)
    good = StepInput(k=np.ones(2), v=np.ones(1), q=np.zeros(2), beta=np.zeros(1))
    bad = StepInput(k=np.full(2, 1e160), v=np.full(1, 1e160), q=np.zeros(2), beta=np.full(1, 1e160))
    with pytest.raises(NumericError) as exc:
        sequential_scan(RuleKind.MAMBA2_LIMIT, DualState.rest(hp), [good, good, bad], hp)
    assert "step 2" in str(exc.value)


# ---------- input validation ----------


def test_step_input_rejects_negative_beta():
    with pytest.raises(RuleContractError):
        StepInput(k=np.ones(2), v=np.ones(1), q=np.ones(2), beta=np.array([-0.1]))


def test_step_input_rejects_negative_step():
    with pytest.raises(DomainError):
        StepInput(k=np.ones(2), v=np.ones(1), q=np.ones(2), beta=np.ones(1), d=-0.5)


def test_head_params_validation():
    with pytest.raises(DomainError):
        HeadParams(d_k=0, d_v=1)
    with pytest.raises(DomainError):
        HeadParams(d_k=1, d_v=1, decay_rate=-1.0)
    with pytest.raises(DomainError):
        HeadParams(d_k=1, d_v=1, prior_precision=0.0)


def test_dual_state_requires_positive_importance():
    with pytest.raises(RuleContractError):
        DualState(mu=np.zeros((1, 2)), imp=np.array([[1.0, 0.0]]))
