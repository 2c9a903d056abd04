import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, stats

from pstune.acquisition import (
    expected_improvement,
    expected_improvement_lognormal,
    norm_cdf,
    orthogonal_sample,
    propose_next,
    random_sample,
)
from pstune.domain import KnobSpace, KnobSpec, SystemSetting, encode_setting
from pstune.errors import ValidationError
from pstune.gp import KernelParams, fit


def ei_by_quadrature(mean, std, best):
    f = lambda y: (best - y) * stats.norm.pdf(y, mean, std)
    val, _ = integrate.quad(f, mean - 12 * std, min(best, mean + 12 * std), epsabs=1e-12, limit=200)
    return max(val, 0.0)


def test_ei_zero_std_is_exactly_zero():
    assert expected_improvement(1.0, 0.0, 5.0) == 0.0


def test_ei_at_best_is_pdf_zero():
    assert expected_improvement(3.0, 1.0, 3.0) == pytest.approx(0.39894, abs=1e-5)


def test_ei_hand_value():
    assert expected_improvement(1.0, 1.0, 2.0) == pytest.approx(1.08332, abs=1e-5)


def test_ei_rejects_bad_inputs():
    with pytest.raises(ValidationError):
        expected_improvement(float("nan"), 1.0, 0.0)
    with pytest.raises(ValidationError):
        expected_improvement(0.0, -1.0, 0.0)


@settings(max_examples=200, deadline=None)
@given(st.floats(-5, 5), st.floats(0.01, 3), st.floats(-5, 5))
def test_ei_lower_bounds(mean, std, best):
    ei = expected_improvement(mean, std, best)
    z = (best - mean) / std
    assert ei >= max(best - mean, 0) * norm_cdf(z) - 1e-12
    if mean < best:
        assert ei >= best - mean - 1e-12


@settings(max_examples=100, deadline=None)
@given(st.floats(-3, -0.01), st.floats(0.05, 2), st.floats(0.01, 1))
def test_ei_increases_with_std(gap, std, extra):
    # mean < best: gap = mean - best < 0; strict growth is only resolvable before EI saturates
    wide, narrow = expected_improvement(gap, std + extra, 0.0), expected_improvement(gap, std, 0.0)
    assert wide >= narrow - 1e-12
    if -gap / std < 5:
        assert wide > narrow


def test_lognormal_ei_matches_quadrature():
    for mu, sigma, best in [(0.0, 0.5, 1.0), (2.0, 0.3, 10.0), (1.0, 1.0, 1.5), (3.0, 0.1, 5.0)]:
        f = lambda z: max(best - math.exp(z), 0.0) * stats.norm.pdf(z, mu, sigma)
        ref, _ = integrate.quad(f, mu - 12 * sigma, math.log(best), epsabs=1e-12, limit=200)
        assert expected_improvement_lognormal(mu, sigma, best) == pytest.approx(ref, abs=1e-8)
    assert expected_improvement_lognormal(0.0, 0.0, 3.0) == pytest.approx(2.0)
    assert expected_improvement_lognormal(0.0, 1.0, 0.0) == 0.0


# -- orthogonal sampling -------------------------------------------------------


def test_size_one_sample_in_range():
    space = KnobSpace((KnobSpec.integer("a", 0, 8), KnobSpec.real("b", -1, 1)))
    (s,) = orthogonal_sample(space, 1, seed=3)
    assert 0 <= s["a"] <= 8 and -1 <= s["b"] <= 1


def test_four_strata_on_integer_knob():
    space = KnobSpace((KnobSpec.integer("a", 0, 8),))
    for seed in range(50):
        vals = sorted(s["a"] for s in orthogonal_sample(space, 4, seed))
        assert len(vals) == 4
        assert 0 <= vals[0] <= 2 < vals[1] <= 4 < vals[2] <= 6 < vals[3] <= 8


def test_real_knob_one_draw_per_stratum():
    space = KnobSpace((KnobSpec.real("x", 0, 1), KnobSpec.real("y", 0, 10)))
    sample = orthogonal_sample(space, 20, seed=7)
    for name, hi in (("x", 1.0), ("y", 10.0)):
        strata = sorted(int(s[name] / hi * 20) for s in sample)
        assert strata == list(range(20))


def test_sample_deterministic_per_seed(space):
    assert orthogonal_sample(space, 30, 11) == orthogonal_sample(space, 30, 11)
    assert orthogonal_sample(space, 30, 11) != orthogonal_sample(space, 30, 12)
    assert random_sample(space, 30, 11) == random_sample(space, 30, 11)


def test_categorical_levels_cycled():
    space = KnobSpace((KnobSpec.nominal("m", ("a", "b", "c")), KnobSpec.real("x", 0, 1)))
    sample = orthogonal_sample(space, 9, seed=1)
    counts = {lvl: sum(s["m"] == lvl for s in sample) for lvl in "abc"}
    assert counts == {"a": 3, "b": 3, "c": 3}


def test_marginals_uniform_over_seeds():
    # finer bins than strata: every half-stratum should be hit equally often
    space = KnobSpace((KnobSpec.real("x", 0, 1), KnobSpec.real("y", 0, 1)))
    size, bins = 5, 10
    counts = np.zeros((2, bins))
    for seed in range(400):
        for s in orthogonal_sample(space, size, seed):
            counts[0, min(int(s["x"] * bins), bins - 1)] += 1
            counts[1, min(int(s["y"] * bins), bins - 1)] += 1
    for row in counts:
        assert stats.chisquare(row).pvalue > 1e-3


# -- proposals -----------------------------------------------------------------


class FixedModel:
    """Stand-in surrogate with prescribed predictions per encoded first coordinate."""

    def __init__(self, table):
        self.table = table

    def predict_many(self, X):
        means = np.array([self.table[round(float(x[0]), 6)][0] for x in X])
        vars_ = np.array([self.table[round(float(x[0]), 6)][1] for x in X])
        return means, vars_


LINE = KnobSpace((KnobSpec.integer("k", 0, 4),))


def _s(k):
    return SystemSetting({"k": k})


def test_single_candidate_returned():
    model = FixedModel({0.25: (9.0, 0.0)})
    assert propose_next(model, [_s(1)], [], 0.1, 1.0, LINE).setting == _s(1)


def test_empty_pool_rejected():
    with pytest.raises(ValidationError):
        propose_next(FixedModel({}), [], [], 0.1, 1.0, LINE)


def test_unexplored_high_variance_beats_known_setting():
    known, fresh = _s(0), _s(4)
    X = [encode_setting(known, LINE, 0.5)]
    model = fit(X, [0.0], params=KernelParams((0.2, 0.2), 1.0, 0.0), standardize=False)
    res = propose_next(model, [fresh], [known], 0.5, 0.0, LINE)
    assert res.setting == fresh
    m_known, v_known = model.predict_many(np.array(X))
    assert expected_improvement(float(m_known[0]), math.sqrt(v_known[0]), 0.0) == pytest.approx(0.0, abs=1e-4)
    assert res.ei_seconds == pytest.approx(expected_improvement(res.predicted_mean, res.predicted_std, 0.0))


def test_all_zero_std_picks_lowest_mean():
    model = FixedModel({0.0: (5.0, 0.0), 0.25: (3.0, 0.0), 0.5: (4.0, 0.0)})
    res = propose_next(model, [_s(0), _s(1), _s(2)], [], 0.1, 1.0, LINE)
    assert res.setting == _s(1) and res.ei_seconds == 0.0


def test_ties_fall_back_to_order():
    model = FixedModel({0.0: (2.0, 0.0), 0.25: (2.0, 0.0)})
    assert propose_next(model, [_s(1), _s(0)], [], 0.1, 1.0, LINE).setting == _s(1)


def test_executed_settings_are_candidates_and_deduplicated():
    model = FixedModel({0.0: (1.0, 1.0), 0.25: (5.0, 1.0)})
    res = propose_next(model, [_s(1), _s(1)], [_s(0), _s(1)], 0.1, 3.0, LINE)
    assert res.setting == _s(0)


@settings(max_examples=50, deadline=None)
@given(st.permutations([0, 1, 2, 3, 4]), st.integers(0, 1000))
def test_proposal_invariant_under_permutation(order, seed):
    rng = np.random.default_rng(seed)
    table = {k / 4: (float(rng.normal()), float(rng.uniform(0.1, 2))) for k in range(5)}
    model = FixedModel(table)
    base = propose_next(model, [_s(k) for k in range(5)], [], 0.1, 0.0, LINE)
    perm = propose_next(model, [_s(k) for k in order], [], 0.1, 0.0, LINE)
    assert base.setting == perm.setting
