from dataclasses import replace

import numpy as np
import numpy.testing as npt
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import CELLS, toy_cate, toy_truth
from transport_meta import ate, numkit, simlab
from transport_meta.data import StudyDataset
from transport_meta.nuisance import WeightChoice

LINEAR = ["1", "x1", "x2", "x3"]
TOY_PSI = float(toy_truth("difference"))


def with_outcome(data, y):
    return StudyDataset(data.g, data.s, data.a, np.where(data.source, y, np.nan), data.X,
                        data.m, data.mode)


@pytest.fixture(scope="module")
def noiseless(diff_dgp, diff_data):
    mean = diff_dgp.q0(diff_data.X, diff_data.s) + diff_data.a0() * diff_dgp.effect(diff_data.X)
    data = with_outcome(diff_data, mean)
    return data, simlab.true_nuisances(diff_dgp, data)


@pytest.fixture(scope="module")
def single_trial(diff_data, diff_dgp):
    keep = diff_data.target | (diff_data.s == 1)
    data = StudyDataset(diff_data.g[keep], diff_data.s[keep], diff_data.a[keep],
                        diff_data.y[keep], diff_data.X[keep], 1)
    full = simlab.true_nuisances(diff_dgp, data)
    nuis = replace(full, eta=np.ones((data.n, 1)), e1=full.e1[:, :1], q0=full.q0[:, :1],
                   v1=full.v1[:, :1], v0=full.v0[:, :1], eligible=np.ones((data.n, 1), bool))
    return data, nuis


@pytest.fixture(scope="module")
def big(diff_dgp):
    data = simlab.gen_dataset(diff_dgp, 100_000, numkit.RngStream(31, 0))
    return data, simlab.true_nuisances(diff_dgp, data)


# ---------------------------------------------------------------------------
# exact toy

@pytest.mark.parametrize("estimator", ["gformula", "ipw_constant", "ipw_optimal", "eif"])
def test_toy_representations_agree(toy_difference, estimator):
    data, nuis = toy_difference
    if estimator == "gformula":
        psi = ate.gformula_ate(data, nuis.effect).psi_hat
    elif estimator == "ipw_constant":
        psi = ate.ipw_ate(data, nuis).psi_hat
    elif estimator == "ipw_optimal":
        psi = ate.ipw_ate(data, nuis, WeightChoice()).psi_hat
    else:
        psi = ate.eif_ate(data, nuis).psi_hat
    assert psi == pytest.approx(TOY_PSI, abs=1e-10)
    assert TOY_PSI == 2.15


@settings(max_examples=40, deadline=None)
@given(st.floats(0.05, 20), st.floats(0.05, 20))
def test_toy_eif_invariant_to_weights(toy_difference, l1, l0):
    data, nuis = toy_difference
    r = ate.eif_ate(data, nuis, WeightChoice("custom", l1, l0))
    assert r.psi_hat == pytest.approx(TOY_PSI, abs=1e-10)


def test_toy_pseudo_outcomes_average_to_cate(toy_difference):
    data, nuis = toy_difference
    zeta = ate.drlearner_pseudo(data, nuis)
    for x in CELLS:
        rows = data.source & np.all(data.X == x, axis=1)
        assert zeta[rows].mean() == pytest.approx(float(toy_cate(x)), abs=1e-12)


# ---------------------------------------------------------------------------
# simple cases

def test_gformula_constant_effect(diff_data):
    r = ate.gformula_ate(diff_data, np.full(diff_data.n, 1.7))
    assert r.psi_hat == pytest.approx(1.7, abs=1e-14)
    assert np.isnan(r.se) and r.diagnostics["plug_in_only"]


def test_ipw_zero_outcome(diff_dgp, diff_data):
    data = with_outcome(diff_data, np.zeros(diff_data.n))
    assert ate.ipw_ate(data, simlab.true_nuisances(diff_dgp, data)).psi_hat == 0.0


@pytest.mark.parametrize("choice", ["optimal", "constant", "custom:1,10"])
def test_noiseless_eif_equals_gformula(noiseless, choice):
    data, nuis = noiseless
    g = ate.gformula_ate(data, nuis.effect).psi_hat
    assert ate.eif_ate(data, nuis, WeightChoice.parse(choice)).psi_hat == pytest.approx(g, abs=1e-12)


@pytest.mark.parametrize("model", ["pooled", "armwise"])
def test_noiseless_variants_equal_gformula(diff_dgp, diff_data, model):
    # the variants assume one outcome law for all trials, so the noiseless data share it
    X = diff_data.X
    data = with_outcome(diff_data, 1 + X[:, 1] + diff_data.a0() * diff_dgp.effect(X))
    nuis = simlab.true_nuisances(diff_dgp, data)
    nuis = replace(nuis, q0=np.repeat((1 + X[:, 1])[:, None], 3, axis=1))
    g = ate.gformula_ate(data, nuis.effect).psi_hat
    assert ate.eif_ate_variant(data, nuis, model).psi_hat == pytest.approx(g, abs=1e-10)


def test_single_source_estimators_coincide(single_trial):
    data, nuis = single_trial
    main = ate.eif_ate(data, nuis)
    for model in ("pooled", "armwise"):
        other = ate.eif_ate_variant(data, nuis, model)
        assert other.psi_hat == pytest.approx(main.psi_hat, abs=1e-10)
        npt.assert_allclose(other.if_values, main.if_values, atol=1e-10)


def test_variants_agree_when_trials_share_outcome_law(diff_dgp, diff_data):
    rng = numkit.RngStream(41, 0).generator()
    X = diff_data.X
    y = diff_dgp.q0(X, np.ones(diff_data.n)) + diff_data.a0() * diff_dgp.effect(X)
    data = with_outcome(diff_data, y + rng.standard_normal(diff_data.n))
    nuis = simlab.true_nuisances(diff_dgp, data)
    nuis = replace(nuis, q0=np.repeat(nuis.q0[:, :1], 3, axis=1), v1=np.ones((data.n, 3)),
                   v0=np.ones((data.n, 3)))
    main = ate.eif_ate(data, nuis)
    for model in ("pooled", "armwise"):
        other = ate.eif_ate_variant(data, nuis, model)
        assert abs(other.psi_hat - main.psi_hat) < 3 * main.se


# ---------------------------------------------------------------------------
# report invariants

@pytest.mark.parametrize("estimator", [ate.eif_ate, ate.ipw_ate])
def test_report_interval_and_residual(diff_dgp, diff_data, estimator):
    r = estimator(diff_data, simlab.true_nuisances(diff_dgp, diff_data))
    npt.assert_allclose(r.ci, (r.psi_hat - 1.959964 * r.se, r.psi_hat + 1.959964 * r.se),
                        rtol=1e-6)
    assert abs(np.mean(r.if_values)) <= 1e-10
    assert abs(r.diagnostics["ee_residual"]) <= 1e-12


def test_report_level_changes_width(diff_dgp, diff_data):
    nuis = simlab.true_nuisances(diff_dgp, diff_data)
    wide = ate.eif_ate(diff_data, nuis, level=0.99)
    narrow = ate.eif_ate(diff_data, nuis, level=0.9)
    assert wide.ci[1] - wide.ci[0] > narrow.ci[1] - narrow.ci[0]


def test_zero_denominator_error(diff_dgp, diff_data):
    nuis = simlab.true_nuisances(diff_dgp, diff_data)
    nuis = replace(nuis, eligible=np.zeros_like(nuis.eligible))
    with pytest.raises(ValueError, match="row 0"):
        ate.eif_ate(diff_data, nuis)


@pytest.mark.parametrize("choice", ["constant", "custom:1,10", "custom:10,1"])
def test_any_weight_consistent(diff_dgp, diff_data, choice):
    truth = simlab.truth_quadrature(diff_dgp)
    r = ate.eif_ate(diff_data, simlab.true_nuisances(diff_dgp, diff_data),
                    WeightChoice.parse(choice))
    assert abs(r.psi_hat - truth) < 3 * r.se


# ---------------------------------------------------------------------------
# efficiency gap

def test_gap_zero_single_trial(single_trial):
    data, nuis = single_trial
    assert ate.efficiency_gap(data, nuis) == pytest.approx(0.0, abs=1e-15)


def test_gap_zero_equal_weights(diff_dgp, diff_data):
    nuis = simlab.true_nuisances(diff_dgp, diff_data)
    c = WeightChoice("constant")
    assert ate.efficiency_gap(diff_data, nuis, alt=c, choice=c) == pytest.approx(0.0, abs=1e-15)


def test_gap_negative_for_optimal(diff_dgp, diff_data):
    nuis = simlab.true_nuisances(diff_dgp, diff_data)
    assert ate.efficiency_gap(diff_data, nuis) < 0
    assert ate.efficiency_gap(diff_data, nuis, alt=WeightChoice.parse("custom:10,1")) < 0


# ---------------------------------------------------------------------------
# DR-learner

def test_noiseless_pseudo_outcomes(noiseless):
    data, nuis = noiseless
    zeta = ate.drlearner_pseudo(data, nuis)
    npt.assert_allclose(zeta[data.source], nuis.effect[data.source], atol=1e-12)
    assert np.all(np.isnan(zeta[data.target]))


def test_constant_weight_pseudo_ignores_eta(diff_dgp, diff_data):
    nuis = simlab.true_nuisances(diff_dgp, diff_data)
    other = replace(nuis, eta=np.full_like(nuis.eta, 1 / 3), eligible=np.ones_like(nuis.eligible))
    c = WeightChoice("constant")
    npt.assert_allclose(ate.drlearner_pseudo(diff_data, nuis, c),
                        ate.drlearner_pseudo(diff_data, other, c))


def test_drlearner_exact_and_intercept_only():
    rng = np.random.default_rng(5)
    X = rng.normal(size=(50, 3))
    zeta = 1 + 2 * X[:, 0] - X[:, 2]
    fit = ate.drlearner_fit(zeta, X, LINEAR)
    npt.assert_allclose(fit.coef, [1, 2, 0, -1], atol=1e-10)
    npt.assert_allclose(fit(X), zeta, atol=1e-10)
    assert ate.drlearner_fit(zeta, X, ["1"]).coef[0] == pytest.approx(zeta.mean())


def test_drlearner_rank_error():
    X = np.column_stack([np.arange(6.0), 2 * np.arange(6.0), np.ones(6)])
    with pytest.raises(numkit.RankError):
        ate.drlearner_fit(np.arange(6.0), X, ["1", "x1", "x2"])


def test_drlearner_recovers_cate(diff_dgp, diff_data):
    nuis = simlab.true_nuisances(diff_dgp, diff_data)
    fit = ate.drlearner_fit(ate.drlearner_pseudo(diff_data, nuis), diff_data.X, LINEAR)
    se = np.sqrt(np.diag(fit.vcov))
    assert np.all(np.abs(fit.coef - [1, 2, 2, 2]) < 3 * se)


# ---------------------------------------------------------------------------
# efficient score and the parametric CATE

def test_score_symmetric_arms(diff_data):
    inp = ate.ScoreInputs(np.zeros(diff_data.n), np.ones(diff_data.n), np.ones(diff_data.n),
                          np.full(diff_data.n, 0.5))
    S = ate.efficient_score_D(diff_data, np.zeros(1), ["1"], inp)[:, 0]
    src = diff_data.source
    npt.assert_allclose(S[src], (diff_data.a[src] - 0.5) * diff_data.y[src])
    assert np.all(S[diff_data.target] == 0)


def test_score_zero_residual(noiseless, diff_dgp):
    data, nuis = noiseless
    inp = ate.ScoreInputs.from_nuisances(data, nuis)
    S = ate.efficient_score_D(data, np.array([1.0, 2, 2, 2]), LINEAR, inp)
    npt.assert_allclose(S, 0.0, atol=1e-12)


def test_m_matrix_matches_finite_differences(diff_dgp, diff_data):
    inp = ate.ScoreInputs.from_nuisances(diff_data, simlab.true_nuisances(diff_dgp, diff_data))
    beta = np.array([0.8, 2.1, 1.9, 2.0])
    J = numkit.finite_diff_jacobian(
        lambda b: ate.efficient_score_D(diff_data, b, LINEAR, inp).mean(axis=0), beta)
    M = ate.m_matrix_D(diff_data, LINEAR, inp)
    npt.assert_allclose(M, J, rtol=1e-4, atol=1e-8 * np.abs(M).max())


def test_score_mean_zero_at_truth(big):
    data, nuis = big
    S = ate.efficient_score_D(data, np.array([1.0, 2, 2, 2]), LINEAR,
                              ate.ScoreInputs.from_nuisances(data, nuis))
    bound = 3 * S.std(axis=0) / np.sqrt(data.n)
    assert np.all(np.abs(S.mean(axis=0)) <= bound)


@pytest.mark.parametrize("wrong", ["e", "Q0"])
def test_double_robustness(big, wrong):
    data, nuis = big
    inp = ate.ScoreInputs.from_nuisances(data, nuis)
    if wrong == "e":
        inp = replace(inp, e1=np.full(data.n, 0.5))
    else:
        inp = replace(inp, q0=np.zeros(data.n))
    fit = ate.solve_beta_D(data, LINEAR, inp)
    se = np.sqrt(np.diag(fit.vcov))
    assert np.all(np.abs(fit.beta - [1, 2, 2, 2]) < 3 * se)


def test_solver_converges_and_matches_ols(diff_dgp, diff_data):
    from transport_meta.nuisance import fit_nuisances
    nuis = fit_nuisances(diff_data, simlab.nuisance_spec(diff_dgp))
    inp = ate.ScoreInputs.from_nuisances(diff_data, nuis)
    fit = ate.solve_beta_D(diff_data, LINEAR, inp, nuis.models["outcome"].effect_coef)
    g = ate.efficient_score_D(diff_data, fit.beta, LINEAR, inp).mean(axis=0)
    assert np.max(np.abs(g)) <= 1e-8
    npt.assert_allclose(fit.vcov, fit.vcov.T)
    assert np.all(np.linalg.eigvalsh(fit.vcov) >= -1e-15)
    se = np.sqrt(np.diag(fit.vcov))
    assert np.all(np.abs(fit.beta - nuis.models["outcome"].effect_coef) < 3 * se)


def test_psi_sp_at_true_beta_is_gformula(diff_dgp, diff_data):
    fit = ate.ParametricCate(LINEAR, np.array([1.0, 2, 2, 2]), np.eye(4))
    r = ate.psi_sp_D(diff_data, fit)
    g = ate.gformula_ate(diff_data, diff_dgp.effect(diff_data.X)).psi_hat
    assert r.psi_hat == pytest.approx(g, abs=1e-12)


def test_psi_sp_zero_effect_centered(diff_data):
    dgp = simlab.DgpSpec("difference", cate=(0.0, 0.0))
    data = simlab.gen_dataset(dgp, 5000, numkit.RngStream(12, 0))
    nuis = simlab.true_nuisances(dgp, data)
    fit = ate.solve_beta_D(data, LINEAR, ate.ScoreInputs.from_nuisances(data, nuis))
    r = ate.psi_sp_D(data, fit)
    assert abs(r.psi_hat) < 3 * r.se
