import math

import numpy as np
import pytest
from pydantic import ValidationError

from app.core.errors import ConfigurationError
from app.services.decision import (
    CriterionStep,
    Decision,
    GuidelineConfig,
    StepName,
    bootstrap_figure_rows,
    bootstrap_reports,
    decide,
    decide_from_tables,
    evaluate_panel,
    parse_table,
    render_table,
    replay,
)
from app.services.reports import EstimatorKind
from app.services.sem_dgp import CanonicalParams, simulate
from app.services.theory import mse_generalized
from tests.conftest import DATA_DIR, make_panel, random_dgp

C, X, XY = EstimatorKind.classic_did, EstimatorKind.matched_x, EstimatorKind.matched_x_y


def by_kind(a, b, c):
    return {C: a, X: b, XY: c}


TABLE_ONE = dict(
    bias=by_kind(-0.03384, 0.02695, 0.02404),
    sv=by_kind(0.01628, 0.03321, 0.03289),
    mse=by_kind(0.00323, 0.00267, 0.00247),
    used_sample_size=by_kind(3841, 2592, 2592),
    n1=1296,
)
TABLE_ONE_SES = {
    "bias": by_kind(0.03112, 0.02830, 0.02827),
    "sv": by_kind(0.00059, 0.00067, 0.00065),
    "mse": by_kind(0.00247, 0.00196, 0.00178),
}


@pytest.fixture
def table_one() -> Decision:
    return decide_from_tables(**TABLE_ONE, ses=TABLE_ONE_SES)


def test_table_one_picks_preoutcome_matching(table_one):
    assert table_one.chosen is XY
    assert [s.step for s in table_one.criteria_path] == [StepName.mse, StepName.bias]
    assert table_one.criteria_path[0].outcome is None
    assert table_one.criteria_path[1].inputs == {X: 0.02695, XY: 0.02404}
    assert table_one.criteria_path[1].assumption


def test_table_one_renders_byte_for_byte(table_one):
    expected = (DATA_DIR / "table1_golden.txt").read_text(encoding="utf-8")
    assert render_table(table_one) == expected


def test_table_one_parses_back(table_one):
    parsed = parse_table(render_table(table_one))
    assert parsed.suggested is XY
    assert parsed.bias[C].value == -0.03384
    assert parsed.bias[C].se == 0.03112
    assert parsed.sv[X].value == 0.03321
    assert parsed.mse[XY].se == 0.00178
    assert parsed.used_sample_size == by_kind(3841, 2592, 2592)
    assert parsed.match_decision[C] == "✓ on Var (S.V) criteria"
    assert parsed.match_decision[X] == "✗"
    assert parsed.match_decision[XY] == "✓ on |Bias| & MSE criteria"


def test_json_round_trip(table_one):
    assert Decision.model_validate_json(render_table(table_one, fmt="json")) == table_one


def test_unknown_format(table_one):
    with pytest.raises(ConfigurationError, match="unknown table format"):
        render_table(table_one, fmt="html")


def test_missing_standard_errors_render_as_dash():
    d = decide_from_tables(**TABLE_ONE)
    text = render_table(d)
    assert "-0.03384 (—)" in text
    assert parse_table(text).bias[C].se is None


def test_figure_rows_scale_standard_errors(table_one):
    fig = bootstrap_figure_rows(table_one)
    assert list(fig["estimator"]) == [k.value for k in (C, X, XY)]
    assert list(fig["chosen"]) == [False, False, True]
    row = fig.iloc[2]
    assert row["label"] == "Match on X and Y^T"
    assert (row["sv"], row["bias"]) == (0.03289, 0.02404)
    assert row["h_x"] == pytest.approx(1.959964 * 0.00065, rel=1e-6)
    assert row["h_y"] == pytest.approx(1.959964 * 0.02827, rel=1e-6)
    assert row["radius"] == pytest.approx(1.959964 * math.sqrt(0.00065 * 0.02827), rel=1e-6)


def test_figure_radius_grows_with_level(table_one):
    narrow = bootstrap_figure_rows(table_one, ci_level=0.5)["radius"]
    wide = bootstrap_figure_rows(table_one, ci_level=0.99)["radius"]
    assert (narrow < wide).all()


def test_figure_radius_missing_without_standard_errors():
    fig = bootstrap_figure_rows(decide_from_tables(**TABLE_ONE))
    assert fig["radius"].isna().all()
    assert list(fig["sv"]) == [0.01628, 0.03321, 0.03289]


@pytest.mark.parametrize("level", [0.0, 1.0, 1.5])
def test_figure_rejects_bad_level(table_one, level):
    with pytest.raises(ConfigurationError):
        bootstrap_figure_rows(table_one, ci_level=level)


def test_parallel_trends_short_circuit():
    d = decide_from_tables(**TABLE_ONE, config=GuidelineConfig(pt_asserted=True))
    assert d.chosen is C
    assert len(d.criteria_path) == 1
    assert d.criteria_path[0].step is StepName.parallel_trends


def test_strict_mse_winner():
    d = decide_from_tables(
        bias=by_kind(0.0, 0.1, 0.2),
        sv=by_kind(0.1, 0.1, 0.1),
        mse=by_kind(0.01, 0.05, 0.06),
        used_sample_size=by_kind(300, 200, 200),
        n1=100,
    )
    assert d.chosen is C
    assert [s.step for s in d.criteria_path] == [StepName.mse]


def test_tolerance_controls_tie():
    tables = dict(
        bias=by_kind(0.03, 0.02, 0.01),
        sv=by_kind(0.1, 0.1, 0.1),
        mse=by_kind(0.0100, 0.0120, 0.0145),
        used_sample_size=by_kind(300, 200, 200),
        n1=2000,
    )
    assert decide_from_tables(**tables).chosen is C
    loose = decide_from_tables(**tables, config=GuidelineConfig(mse_similarity_rel_tol=0.5))
    assert loose.chosen is XY
    assert loose.criteria_path[-1].step is StepName.bias


@pytest.mark.parametrize(
    "n1, last_step, chosen",
    [(2000, StepName.bias, XY), (40, StepName.variance, C)],
)
def test_similar_runner_up_mses_defer_to_next_step(n1, last_step, chosen):
    d = decide_from_tables(
        bias=by_kind(0.5, 0.3, 0.1),
        sv=by_kind(0.2, 0.3, 0.3),
        mse=by_kind(1.0, 2.0, 2.05),
        used_sample_size=by_kind(3 * n1, 2 * n1, 2 * n1),
        n1=n1,
    )
    assert [s.step for s in d.criteria_path] == [StepName.mse, last_step]
    assert d.criteria_path[0].outcome is None
    assert d.chosen is chosen
    assert replay(d) is chosen


@pytest.mark.parametrize("sv_classic, chosen", [(0.05, C), (0.20, XY)])
def test_small_sample_variance_criterion(sv_classic, chosen):
    d = decide_from_tables(
        bias=by_kind(0.01, 0.01, 0.01),
        sv=by_kind(sv_classic, 0.1, 0.1),
        mse=by_kind(0.02, 0.02, 0.02),
        used_sample_size=by_kind(400, 80, 80),
        n1=40,
    )
    assert d.chosen is chosen
    last = d.criteria_path[-1]
    assert last.step is StepName.variance
    assert last.n1 == 40
    assert last.inputs[C] == pytest.approx(sv_classic ** 2)


def test_replay_reproduces_choice(table_one):
    assert replay(table_one) is table_one.chosen


def test_replay_detects_tampering(table_one):
    with pytest.raises(ConfigurationError):
        replay(table_one.model_copy(update={"chosen": C}))
    step = table_one.criteria_path[1].model_copy(update={"inputs": {X: 0.01, XY: 0.02}})
    with pytest.raises(ConfigurationError):
        replay(table_one.model_copy(update={"criteria_path": [table_one.criteria_path[0], step]}))


def test_unsettled_path_rejected(table_one):
    payload = table_one.model_dump()
    payload["criteria_path"] = [CriterionStep(step=StepName.mse, inputs=by_kind(1, 1, 1), tolerance=0.1).model_dump()]
    with pytest.raises(ValidationError):
        Decision.model_validate(payload)


def test_config_bounds():
    with pytest.raises(ValidationError):
        GuidelineConfig(bootstrap_reps=10)
    with pytest.raises(ValidationError):
        GuidelineConfig(mse_similarity_rel_tol=0.0)


def effect_only_panel(rng, tau=0.7, n1=10, n0=20):
    """Unit and period effects plus a constant treatment effect; X is pure noise."""
    n = n1 + n0
    z = np.array([1] * n1 + [0] * n0)
    alpha = rng.normal(size=n)
    y = alpha[:, None] + np.array([0.5, 2.0])
    y[:, 1] += tau * z
    return make_panel(y=y, z=z, x=rng.normal(size=(n, 1)))


def test_bootstrap_is_deterministic(rng):
    panel = effect_only_panel(rng)
    a = bootstrap_reports(panel, None, reps=2, seed=5)
    b = bootstrap_reports(panel, None, reps=2, seed=5)
    assert a.replicates == b.replicates
    assert a.ses == b.ses
    assert a.failed == []


def test_bootstrap_ses_vanish_without_noise(rng):
    boot = bootstrap_reports(effect_only_panel(rng), None, reps=30, seed=1)
    for kind in (C, X):
        for name in ("tau_hat", "bias", "mse"):
            assert boot.ses[name][kind] < 1e-8
    assert boot.ses["bias"][XY] < 1e-8
    assert boot.means["tau_hat"][C] == pytest.approx(0.7)
    assert all(ev.tau_hat[C] == pytest.approx(0.7) for ev in boot.replicates)


def test_bootstrap_needs_replicates(rng):
    with pytest.raises(ConfigurationError):
        bootstrap_reports(effect_only_panel(rng), None, reps=0, seed=1)


def test_evaluate_panel_point_estimates(rng):
    ev = evaluate_panel(effect_only_panel(rng))
    assert ev.tau_hat[C] == pytest.approx(0.7)
    assert ev.tau_hat[X] == pytest.approx(0.7)
    assert ev.n_matched == 10
    assert ev.report.n_matched == 10


def test_decide_fills_effect_and_correction(rng):
    panel = simulate(random_dgp(rng, q=1, p=1, t_pre=2, n_units=120, n_treated=40), seed=2)
    d = decide(panel, with_bootstrap=False)
    chosen = d.chosen
    assert set(d.tau_hat) == {C, X, XY}
    assert d.bias_corrected_tau == pytest.approx(d.tau_hat[chosen] - d.bias_table[chosen].value)
    assert d.bias_correction.se is None
    assert d.reliability_hat is not None
    assert d.used_sample_size == by_kind(120, 80, 80)
    assert replay(d) is chosen
    assert d.bootstrap_reps == 0


def test_decide_is_deterministic_with_bootstrap(rng):
    panel = simulate(random_dgp(rng, q=1, p=1, t_pre=1, n_units=60, n_treated=20), seed=3)
    config = GuidelineConfig(bootstrap_reps=100, seed=9)
    a = decide(panel, config)
    b = decide(panel, config, threads=3)
    assert a == b
    assert a.bootstrap_reps == 100
    assert a.bias_table[C].se is not None
    assert a.bias_correction.se is not None and a.bias_correction.se >= 0
    fig = bootstrap_figure_rows(a)
    for i, kind in enumerate((C, X, XY)):
        assert fig["sv"][i] == a.bootstrap_means["sv"][kind]
        assert fig["bias"][i] == a.bootstrap_means["bias"][kind]
    assert fig["radius"].notna().all()


@pytest.mark.slow
def test_decide_finds_clear_mse_winner():
    params = CanonicalParams(
        beta_theta=(3.0, 4.0),
        mu_theta=(0.0, 1.0),
        n_units=5000,
        n_treated=2500,
    ).to_dgp()
    truth = mse_generalized(params, 2500, 2500).estimators
    assert truth[C].mse >= 3 * truth[XY].mse and truth[X].mse >= 3 * truth[XY].mse
    hits = sum(decide(simulate(params, seed=s), with_bootstrap=False).chosen is XY for s in range(200))
    assert hits >= 190
