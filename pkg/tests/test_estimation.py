import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from netform.design import DesignPlan, OfficeDesign, build_sample
from netform.estimation import (
    GramFactor,
    OfficeFit,
    aggregate,
    fit_sample,
    ipw_fit,
    permuted_estimate,
    within_fit,
)
from netform.exceptions import NumericalError, ValidationError


def one_office(D, Y, mode):
    D = np.asarray(D, dtype=float)
    m, J, _ = D.shape
    plan = DesignPlan((OfficeDesign("A", tuple(range(m)), tuple(range(m, m + J))),), 0, m + J)
    return build_sample(plan, {"A": D}, {"A": np.asarray(Y, dtype=float)}, mode)


TWO_HIRES = [[[1, 1]], [[1, 0]]]


class TestIPW:
    def test_two_hire_example(self):
        fit = fit_sample(one_office(TWO_HIRES, [[1], [0]], "ipw"))
        assert np.allclose(fit.estimate, [0.0, 1.0], atol=1e-12)

    @pytest.mark.parametrize("y, expected", [(0.0, [0.0, 0.0]), (1.0, [1.0, 0.0])])
    def test_constant_outcome(self, y, expected):
        fit = fit_sample(one_office(TWO_HIRES, [[y], [y]], "ipw"))
        assert np.allclose(fit.estimate, expected, atol=1e-12)

    def test_swap_gives_negative_slope(self):
        fit = fit_sample(one_office(TWO_HIRES, [[1], [0]], "ipw"))
        est = permuted_estimate(fit.office_fits[0], [1, 0])
        assert np.allclose(est, [1.0, -1.0], atol=1e-12)

    def test_table_matches_refit(self):
        rng = np.random.default_rng(0)
        D = np.concatenate([np.ones((5, 7, 1)), rng.integers(0, 2, (5, 7, 1))], axis=2)
        D[0, :, 1], D[1, :, 1] = 0, 1
        Y = (rng.random((5, 7)) < 0.4).astype(float)
        office = one_office(D, Y, "ipw").offices[0]
        with_table, without = ipw_fit(office), ipw_fit(office, with_table=False)
        assert np.allclose(with_table.estimate, without.estimate, atol=1e-12)
        for sigma in [rng.permutation(5) for _ in range(10)]:
            assert np.allclose(permuted_estimate(with_table, sigma), permuted_estimate(without, sigma),
                               atol=1e-12)

    def test_requires_probabilities(self):
        office = one_office(TWO_HIRES, [[1], [0]], "late").offices[0]
        with pytest.raises(ValidationError):
            ipw_fit(office)


class TestWithin:
    def test_two_hire_example(self):
        fit = fit_sample(one_office(TWO_HIRES, [[1], [0]], "late"))
        assert np.allclose(fit.estimate, [0.0, 1.0], atol=1e-12)

    def test_duplicate_columns(self):
        D = np.repeat(np.asarray(TWO_HIRES, dtype=float), 3, axis=1)
        fit = fit_sample(one_office(D, np.array([[1, 1, 1], [0, 0, 0]]), "late"))
        assert np.allclose(fit.estimate, [0.0, 1.0], atol=1e-12)

    def test_continuous_treatment(self):
        x = np.array([0.0, 1.0, 2.5])
        D = np.stack([np.ones(3), x], axis=1)[:, None, :]
        Y = (0.5 + 2.0 * x)[:, None]
        fit = fit_sample(one_office(D, Y, "late"))
        assert np.allclose(fit.estimate, [0.5, 2.0], atol=1e-12)

    def test_singular_column(self):
        office = one_office(TWO_HIRES, [[1], [0]], "late").offices[0]
        from dataclasses import replace

        bad = replace(office, D=np.ones((2, 1, 2)))
        with pytest.raises(NumericalError):
            within_fit(bad)


class TestAggregate:
    def _fit(self, m, est):
        return OfficeFit("o", "late", tuple(range(m)), np.asarray(est, dtype=float), None, None, None)

    def test_equal_sizes(self):
        agg = aggregate([self._fit(2, [0, 1]), self._fit(2, [0, 3])])
        assert np.allclose(agg.estimate, [0, 2])

    def test_weights(self):
        agg = aggregate([self._fit(2, [5.0]), self._fit(3, [0.0])])
        assert np.allclose(agg.weights, [0.4, 0.6])
        assert agg.estimate[0] == pytest.approx(2.0)

    def test_mixed_kinds(self):
        other = OfficeFit("o", "ipw", (0, 1), np.zeros(1), None, None, None)
        with pytest.raises(ValidationError):
            aggregate([self._fit(2, [0.0]), other])

    def test_empty(self):
        with pytest.raises(ValidationError):
            aggregate([])


def test_fit_without_tables_matches():
    rng = np.random.default_rng(4)
    D = np.concatenate([np.ones((4, 6, 1)), rng.normal(size=(4, 6, 1))], axis=2)
    Y = rng.normal(size=(4, 6))
    s = one_office(D, Y, "late")
    a, b = fit_sample(s), fit_sample(s, table_budget=0)
    assert a.has_tables and not b.has_tables
    assert np.allclose(a.estimate, b.estimate, atol=1e-12)


def test_threads_agree():
    rng = np.random.default_rng(8)
    offices, D, Y, base = [], {}, {}, 0
    for o in range(4):
        offices.append(OfficeDesign(f"o{o}", tuple(range(base, base + 3)), tuple(range(100 + 5 * o, 105 + 5 * o))))
        base += 3
        D[f"o{o}"] = np.concatenate([np.ones((3, 5, 1)), rng.normal(size=(3, 5, 1))], axis=2)
        Y[f"o{o}"] = rng.normal(size=(3, 5))
    s = build_sample(DesignPlan(tuple(offices), 0, 200), D, Y, "late")
    assert np.array_equal(fit_sample(s, threads=1).estimate, fit_sample(s, threads=3).estimate)


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 6), st.integers(1, 6), st.integers(0, 2**31))
def test_gram_factor_solves_normal_equations(m, k, seed):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(m * 3 + k, k))
    rhs = rng.normal(size=k)
    sol = GramFactor(X).solve(rhs)
    assert np.allclose(X.T @ X @ sol, rhs, atol=1e-8 * (1 + np.abs(rhs).max()) * np.linalg.cond(X) ** 2)


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 5), st.integers(1, 5), st.integers(0, 2**31))
def test_table_diagonal_is_estimate(m, J, seed):
    rng = np.random.default_rng(seed)
    D = np.concatenate([np.ones((m, J, 1)), rng.normal(size=(m, J, 1))], axis=2)
    Y = rng.normal(size=(m, J))
    fit = within_fit(one_office(D, Y, "late").offices[0])
    assert np.allclose(fit.table[np.arange(m), np.arange(m)].sum(axis=0), fit.estimate)
    assert np.allclose(within_fit(fit.sample, with_table=False).estimate, fit.estimate, atol=1e-10)
