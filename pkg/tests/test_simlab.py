import json
from dataclasses import replace

import numpy as np
import numpy.testing as npt
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from transport_meta import numkit, simlab
from transport_meta.simlab import DgpSpec, ScenarioConfig, SummaryRow


@pytest.fixture(scope="module")
def million(diff_dgp):
    return simlab.gen_dataset(diff_dgp, 1_000_000, numkit.RngStream(61, 0))


def small_cell(mode="difference", **kw):
    est = "eif_ate" if mode == "difference" else "eif_cmr"
    base = dict(dgp=DgpSpec(mode), n=600, reps=6, seed=3, estimator=est)
    base.update(kw)
    return ScenarioConfig(**base)


# ---------------------------------------------------------------------------
# data-generating process

def test_covariate_moments(million):
    X = million.X
    npt.assert_allclose(X.mean(axis=0), 0.0, atol=0.01)
    C = np.corrcoef(X.T)
    npt.assert_allclose(C[np.triu_indices(3, 1)], 0.5, atol=0.01)


def test_selection_at_origin(diff_dgp, million):
    assert diff_dgp.pi(np.zeros((1, 3)))[0] == pytest.approx(0.25, abs=1e-15)
    D = np.column_stack([np.ones(million.n), million.X])
    at_zero = numkit.expit(numkit.logistic_fit(D, million.g).coef[0])
    assert at_zero == pytest.approx(0.25, abs=0.01)
    assert million.g.mean() == pytest.approx(diff_dgp.pi(million.X).mean(), abs=0.003)


@pytest.mark.parametrize("segment, trials", [(0, {1}), (1, {1, 2}), (2, {1, 2, 3}),
                                             (3, {2, 3}), (4, {3})])
def test_segment_membership_exact(diff_dgp, million, segment, trials):
    seg = diff_dgp.segment(million.X)
    rows = million.source & (seg == segment)
    assert set(np.unique(million.s[rows]).tolist()) == trials


def test_lowest_segment_is_trial_one(million):
    rows = million.source & (million.X[:, 0] <= -0.8)
    assert np.all(million.s[rows] == 1)


@pytest.mark.parametrize("trial, e", [(1, 0.5), (2, 0.4), (3, 0.6)])
def test_randomization_rates(million, trial, e):
    assert million.a[million.s == trial].mean() == pytest.approx(e, abs=0.01)


def test_trial_noise_level(diff_dgp, million):
    rows = million.s == 2
    X = million.X[rows]
    mean = diff_dgp.q0(X, np.full(len(X), 2)) + million.a[rows] * diff_dgp.effect(X)
    assert np.var(million.y[rows] - mean) == pytest.approx(5.0, rel=0.02)


def test_ratio_outcomes(ratio_dgp):
    data = simlab.gen_dataset(ratio_dgp, 200_000, numkit.RngStream(62, 0))
    assert np.all(data.y > 0) and np.all(data.a[data.target] == 0)
    rows = data.s == 3
    X = data.X[rows]
    mean = ratio_dgp.q0(X, np.full(len(X), 3)) * ratio_dgp.effect(X) ** data.a[rows]
    ratio = data.y[rows] / mean
    assert ratio.mean() == pytest.approx(1.0, abs=0.01)
    assert ratio.var() == pytest.approx(1 / 9, rel=0.05)


@pytest.mark.parametrize("kw", [dict(cuts=(0.0, -1.0, 1.0, 2.0)), dict(propensity=(0.5, 1.0, 0.5)),
                                dict(rho=1.5), dict(mode="odds")])
def test_invalid_dgp(kw):
    with pytest.raises((ValueError, np.linalg.LinAlgError)):
        DgpSpec(**kw)


# ---------------------------------------------------------------------------
# truths

@pytest.mark.parametrize("mode, value", [("difference", 2.8687), ("ratio", 2.0657)])
def test_truth_by_quadrature(mode, value):
    assert simlab.truth_quadrature(DgpSpec(mode)) == pytest.approx(value, abs=1e-4)


@pytest.mark.parametrize("mode", ["difference", "ratio"])
def test_oracle_agrees_with_quadrature(mode):
    spec = DgpSpec(mode)
    value, se = simlab.oracle_truth(spec, n_oracle=10 ** 6, use_cache=False)
    assert se < 2e-3
    assert abs(value - simlab.truth_quadrature(spec)) < 4 * se


def test_zero_effect_truth():
    spec = DgpSpec("difference", cate=(0.0, 0.0))
    assert simlab.oracle_truth(spec, n_oracle=10 ** 4, use_cache=False)[0] == 0.0


def test_oracle_cache(tmp_path, monkeypatch):
    monkeypatch.setenv("TRANSPORT_META_CACHE", str(tmp_path))
    spec = DgpSpec("difference")
    first = simlab.oracle_truth(spec, n_oracle=2 * 10 ** 4)
    table = json.loads((tmp_path / "oracle.json").read_text())
    assert list(table.values()) == [list(first)]
    assert simlab.oracle_truth(spec, n_oracle=2 * 10 ** 4) == first
    assert spec.key() != replace(spec, rho=0.4).key()


# ---------------------------------------------------------------------------
# scenarios

def test_config_validation():
    with pytest.raises(ValueError):
        small_cell(estimator="eif_cmr")
    with pytest.raises(ValueError):
        small_cell(reps=0)
    with pytest.raises(ValueError):
        small_cell(misspec=("W",))
    with pytest.raises(ValueError):
        small_cell(weights="heavy")


def test_config_dict_round_trip():
    cfg = small_cell("ratio", misspec=("Q0", "V"), weights="custom:1,10", label="2")
    assert ScenarioConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg


def test_single_replication_coverage():
    res = simlab.run_scenario(small_cell(reps=1), truth=2.8687)
    assert res.row.coverage in (0.0, 100.0)
    assert res.row.reps == 1 and res.row.variance == 0.0


def test_deterministic_rows():
    a = simlab.run_scenario(small_cell(), truth=2.8687)
    b = simlab.run_scenario(small_cell(), truth=2.8687)
    assert a.estimates.tobytes() == b.estimates.tobytes()
    assert a.row == b.row


@pytest.mark.parametrize("mode", ["difference", "ratio"])
def test_threads_do_not_change_results(mode):
    cfg = small_cell(mode)
    serial = simlab.run_scenario(cfg, threads=1, truth=2.0)
    parallel = simlab.run_scenario(cfg, threads=3, truth=2.0)
    assert serial.estimates.tobytes() == parallel.estimates.tobytes()
    assert serial.row == parallel.row


def test_seed_changes_results():
    a = simlab.run_scenario(small_cell(reps=2), truth=2.8687)
    b = simlab.run_scenario(small_cell(reps=2, seed=4), truth=2.8687)
    assert not np.array_equal(a.estimates, b.estimates)


@pytest.mark.parametrize("estimator, misspec", [
    ("eif_ate", ()), ("eif_ate_pooled", ()), ("eif_ate_armwise", ()), ("ipw_ate", ()),
    ("gformula_ate", ("D",)), ("psi_sp_D", ()),
    ("eif_cmr", ("Qx",)), ("eif_cmr_pooled", ()), ("eif_cmr_armwise", ()),
    ("psi_sp_R", ("Q0", "e", "V")),
])
def test_every_estimator_runs(estimator, misspec):
    mode = "ratio" if "cmr" in estimator or estimator.endswith("_R") else "difference"
    cfg = small_cell(mode, estimator=estimator, misspec=misspec, reps=2, n=1500)
    res = simlab.run_scenario(cfg, truth=2.0)
    assert res.errors == []
    assert np.all(np.isfinite(res.estimates[:, 0]))


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-10, 10), min_size=1, max_size=40), st.floats(-5, 5))
def test_rmse_identity(psi, truth):
    psi = np.array(psi)
    se = np.ones_like(psi)
    row = SummaryRow.from_estimates("x", 10, truth, psi, se, psi - 1, psi + 1)
    assert row.rmse ** 2 == pytest.approx(row.bias ** 2 + row.variance, rel=1e-9, abs=1e-12)
    assert row.rmse ** 2 >= row.bias ** 2 * (1 - 1e-12)
    assert 0 <= row.coverage <= 100


def test_failures_excluded_and_counted():
    psi = np.array([1.0, np.nan, 3.0])
    row = SummaryRow.from_estimates("x", 10, 2.0, psi, np.ones(3), psi - 1, psi + 1, failures=1)
    assert (row.reps, row.failures, row.mean, row.coverage) == (2, 1, 2.0, 100.0)


# ---------------------------------------------------------------------------
# presets and tables

@pytest.mark.parametrize("name, cells", [("table1", 8), ("table2", 8), ("table3", 10)])
def test_preset_shapes(name, cells):
    grid = simlab.preset(name, reps=5)
    assert len(grid) == cells
    assert {c.n for c in grid} == {1250, 5000}
    assert all(c.reps == 5 for c in simlab.with_reps(grid, 5))


def test_preset_unknown():
    with pytest.raises(ValueError):
        simlab.preset("table4")


def fake_rows(k):
    return [SummaryRow(str(j % 4 + 1), 1250 if j < 4 else 5000, 10, 2.87, 2.86 + j / 100,
                       -0.01 + j / 100, 0.1 * (j + 1), 0.09, 95.0 - j, 0.01) for j in range(k)]


def test_table_shape():
    csv_text, text = simlab.emit_table(fake_rows(8), "table1")
    lines = csv_text.strip().splitlines()
    assert [ln.split(",")[0] for ln in lines] == ["stat", "Mean", "Bias", "RMSE", "Coverage", "SE"]
    assert all(len(ln.split(",")) == 9 for ln in lines)
    assert len(text.strip().splitlines()) == 6


def test_table_empty_is_header_only():
    csv_text, _ = simlab.emit_table([], "table2")
    assert csv_text.splitlines()[0] == "stat"


@pytest.mark.parametrize("layout", ["table1", "table2", "table3"])
def test_table_round_trip(layout):
    rows = fake_rows(8)
    parsed = simlab.parse_table_csv(simlab.emit_table(rows, layout)[0])
    scale = 1 if layout == "table1" else 100
    for r in rows:
        col = parsed[f"n={r.n}:{r.label}"]
        assert col["Bias"] == pytest.approx(100 * r.bias, abs=5e-3)
        assert col["RMSE"] == pytest.approx(scale * r.rmse, abs=5e-3)
        assert col["Coverage"] == pytest.approx(r.coverage, abs=5e-3)
    again = simlab.emit_table(rows, layout)[0]
    assert simlab.parse_table_csv(again) == parsed


def test_table_unknown_layout():
    with pytest.raises(ValueError):
        simlab.emit_table(fake_rows(1), "table9")
