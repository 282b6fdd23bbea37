import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from netform.design import (
    DesignPlan,
    OfficeDesign,
    assignment_probabilities,
    build_sample,
    draw_matrix,
    draw_positions,
    enumerate_group,
    enumerate_local,
    enumerate_matrix,
    global_to_local,
    local_to_global,
    median_threshold,
    plan_from_network,
    restrict_sample,
    sample_from_network,
    sample_local,
    sample_permutation,
    shift_outcomes,
)
from netform.exceptions import CapExceededError, ValidationError
from netform.network import NetStat, build_network


def plan_of(sizes, seed=0, cols=2):
    offices, base = [], 0
    for o, m in enumerate(sizes):
        offices.append(OfficeDesign(f"o{o}", tuple(range(base, base + m)), ()))
        base += m
    J = tuple(range(base, base + cols))
    return DesignPlan(tuple(OfficeDesign(o.office_id, o.I, J) for o in offices), seed, base + cols)


class TestPlan:
    def test_from_network(self, five_node_net):
        plan = plan_from_network(five_node_net, master_seed=3)
        assert [o.office_id for o in plan.offices] == ["A"]
        assert plan.offices[0].I == (0, 1)
        assert plan.offices[0].J == (2, 3, 4)

    def test_office_scope(self):
        rows = [{"id": "h1", "office": "A", "new_hire": True}, {"id": "h2", "office": "A", "new_hire": True},
                {"id": "a", "office": "A"}, {"id": "b", "office": "B"}]
        net = build_network(rows, [], [])
        plan = plan_from_network(net, candidates="office")
        assert plan.offices[0].J == (2,)

    def test_candidate_flag(self):
        rows = [{"id": "h1", "office": "A", "new_hire": True, "covariates": {"candidate": 0}},
                {"id": "h2", "office": "A", "new_hire": True, "covariates": {"candidate": 0}},
                {"id": "a", "covariates": {"candidate": 1}}, {"id": "b", "covariates": {"candidate": 0}}]
        plan = plan_from_network(build_network(rows, [], []))
        assert plan.offices[0].J == (2,)

    def test_no_hires(self):
        net = build_network([{"id": "a"}, {"id": "b"}], [], [])
        with pytest.raises(ValidationError):
            plan_from_network(net)

    @pytest.mark.parametrize("sizes, expected", [((3, 2), 12), ((3,), 6), ((2, 2), 4), ((4, 4), 576)])
    def test_group_size(self, sizes, expected):
        assert plan_of(sizes).group_size == expected

    def test_hire_in_two_offices(self):
        with pytest.raises(ValidationError):
            DesignPlan((OfficeDesign("a", (0, 1), (3,)), OfficeDesign("b", (1, 2), (3,))))


class TestPermutationGroup:
    def test_singleton_office_is_fixed(self):
        plan = plan_of((1, 3))
        for r in range(50):
            assert sample_local(plan, r)[0].tolist() == [0]

    @pytest.mark.parametrize("m", [2, 3])
    def test_uniform_draws(self, m):
        R = 10_000
        pos = draw_matrix((m,), 123, np.arange(R))
        perms = {p: k for k, p in enumerate(itertools.permutations(range(m)))}
        counts = np.bincount([perms[tuple(row)] for row in pos], minlength=len(perms))
        assert stats.chisquare(counts).pvalue > 1e-3

    def test_draws_are_deterministic(self):
        a = draw_positions((3, 4), 99, 17)
        b = draw_positions((3, 4), 99, 17)
        assert np.array_equal(a, b)
        assert not all(np.array_equal(draw_positions((3, 4), 99, r), a) for r in range(18, 30))
        assert np.array_equal(draw_matrix((3, 4), 99, [17])[0], a)

    def test_enumeration_identity_first_and_complete(self):
        plan = plan_of((3, 2))
        elems = [tuple(np.concatenate(loc)) for loc in enumerate_local(plan)]
        assert len(elems) == len(set(elems)) == 12
        assert elems[0] == (0, 1, 2, 0, 1)
        mat = enumerate_matrix(plan.sizes)
        assert [tuple(r) for r in mat] == elems

    def test_enumerate_group_identity(self):
        plan = plan_of((2, 2))
        first = next(enumerate_group(plan))
        assert np.array_equal(first, np.arange(plan.n))

    def test_cap(self):
        with pytest.raises(CapExceededError):
            list(enumerate_local(plan_of((4, 4)), cap=100))
        with pytest.raises(CapExceededError):
            enumerate_matrix((5, 5), cap=1000)

    def test_global_local_round_trip(self):
        plan = plan_of((3, 4), seed=5)
        for r in range(20):
            pi = sample_permutation(plan, r)
            local = global_to_local(plan, pi)
            assert np.array_equal(local_to_global(plan, local), pi)

    def test_global_outside_group(self):
        plan = plan_of((2, 2))
        pi = np.arange(plan.n)
        pi[[1, 2]] = [2, 1]
        with pytest.raises(ValidationError):
            global_to_local(plan, pi)
        pi = np.arange(plan.n)
        pi[[4, 5]] = [5, 4]
        with pytest.raises(ValidationError):
            global_to_local(plan, pi)

    def test_group_laws(self):
        plan = plan_of((3, 2))
        members = {tuple(p) for p in enumerate_group(plan)}
        for a in members:
            inv = np.argsort(a)
            assert tuple(inv) in members
            for b in list(members)[:5]:
                assert tuple(np.asarray(a)[list(b)]) in members


class TestProbabilities:
    def test_binary_half(self):
        D = np.array([[[1, 1]], [[1, 0]]], dtype=float)
        table, P = assignment_probabilities(D)
        assert np.allclose(P, 0.5)
        assert table.prob(0, [1, 1]) == 0.5

    def test_constant_column(self):
        D = np.ones((3, 1, 2))
        _, P = assignment_probabilities(D)
        assert np.all(P == 1.0)

    def test_four_hires(self):
        D = np.zeros((4, 1, 2))
        D[..., 0] = 1
        D[:2, 0, 1] = 1
        table, P = assignment_probabilities(D)
        assert np.all(P == 0.5)
        assert table.prob(0, [1, 5]) == 0.0

    @settings(max_examples=50, deadline=None)
    @given(st.integers(2, 6), st.integers(1, 5), st.integers(0, 2**31), st.data())
    def test_equivariance(self, m, J, seed, data):
        rng = np.random.default_rng(seed)
        D = np.concatenate([np.ones((m, J, 1)), rng.integers(0, 3, (m, J, 1))], axis=2)
        sigma = np.asarray(data.draw(st.permutations(list(range(m)))))
        t1, P1 = assignment_probabilities(D)
        t2, P2 = assignment_probabilities(D[sigma])
        assert np.array_equal(t1.freq, t2.freq)
        assert np.array_equal(P2, P1[sigma])
        assert np.allclose(t1.freq.sum(axis=1), 1.0)


class TestSamples:
    def test_drops_column_without_support(self, five_node_net, five_node_plan):
        s = sample_from_network(five_node_net, five_node_plan, [NetStat("indirect_flag")], mode="ipw")
        assert s.offices[0].cols == (2,)
        assert s.dropped_pairs() == {"no_full_support": 2}
        assert s.n_pairs + 2 == s.n_input_pairs == 4

    def test_late_drops_rank_deficient(self, five_node_net, five_node_plan):
        s = sample_from_network(five_node_net, five_node_plan, [NetStat("indirect_flag")], mode="late")
        assert s.offices[0].cols == (2,)
        assert "rank_deficient" in s.dropped_pairs()

    def test_constant_treatment(self, five_node_net, five_node_plan):
        with pytest.raises(ValidationError, match="no identifying variation"):
            sample_from_network(five_node_net, five_node_plan, [NetStat("degree", 75.0)], mode="ipw")
        with pytest.raises(ValidationError, match="no identifying variation"):
            sample_from_network(five_node_net, five_node_plan, [NetStat("degree", 75.0)], mode="late")

    def test_late_keeps_rank_two_column(self):
        plan = plan_of((3,), cols=1)
        D = np.ones((3, 1, 2))
        D[:, 0, 1] = [0.0, 1.0, 2.5]
        s = build_sample(plan, {"o0": D}, {"o0": np.zeros((3, 1))}, "late")
        assert s.n_pairs == 3 and not s.drops

    def test_continuous_rejected_in_ipw(self):
        plan = plan_of((3,), cols=1)
        D = np.ones((3, 1, 2))
        D[:, 0, 1] = [0.0, 1.0, 2.5]
        with pytest.raises(ValidationError, match="LATE"):
            build_sample(plan, {"o0": D}, {"o0": np.zeros((3, 1))}, "ipw")

    def test_undefined_rows_and_singleton(self):
        plan = plan_of((2, 3), cols=2)
        D = {"o0": np.ones((2, 2, 2)), "o1": np.ones((3, 2, 2))}
        D["o0"][0, :, 1] = np.nan
        D["o1"][:, :, 1] = np.array([[0, 1], [1, 0], [1, 1]])
        Y = {"o0": np.zeros((2, 2)), "o1": np.zeros((3, 2))}
        s = build_sample(plan, D, Y, "late")
        reasons = s.dropped_pairs()
        assert reasons["undefined_treatment"] == 2 and reasons["singleton_office"] == 2
        assert [o.office_id for o in s.offices] == ["o1"]
        assert s.plan.sizes == [3]

    def test_shape_mismatch(self):
        plan = plan_of((2,), cols=2)
        with pytest.raises(ValidationError):
            build_sample(plan, {"o0": np.ones((2, 3, 2))}, {"o0": np.zeros((2, 3))})

    def test_identity_filter(self, five_node_net, five_node_plan):
        s = sample_from_network(five_node_net, five_node_plan, [NetStat("indirect_flag")], mode="ipw")
        r = restrict_sample(s, lambda i: True, lambda j: True)
        assert r.n_pairs == s.n_pairs and r.drops == s.drops

    def test_filter_to_singleton(self, five_node_net, five_node_plan):
        s = sample_from_network(five_node_net, five_node_plan, [NetStat("indirect_flag")], mode="ipw")
        with pytest.raises(ValidationError):
            restrict_sample(s, lambda i: i == 0)

    def test_shift_outcomes(self, five_node_net, five_node_plan):
        s = sample_from_network(five_node_net, five_node_plan, [NetStat("indirect_flag")], mode="late")
        shifted = shift_outcomes(s, 1, 0.5)
        o, so = s.offices[0], shifted.offices[0]
        assert np.array_equal(so.Y, o.Y - 0.5 * o.D[..., 1])
        with pytest.raises(ValidationError):
            shift_outcomes(s, 0, 1.0)

    def test_median_threshold(self, five_node_net, five_node_plan):
        assert median_threshold(five_node_net, five_node_plan, "indirect_count") == 0.0

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**31), st.data())
    def test_column_multisets_invariant(self, seed, data):
        rng = np.random.default_rng(seed)
        D = np.concatenate([np.ones((4, 3, 1)), rng.integers(0, 2, (4, 3, 1))], axis=2)
        plan = plan_of((4,), cols=3)
        sigma = np.asarray(data.draw(st.permutations(list(range(4)))))
        Y = {"o0": np.zeros((4, 3))}
        try:
            a = build_sample(plan, {"o0": D}, Y, "ipw", support=np.array([[1, 0], [1, 1]]))
        except ValidationError:
            with pytest.raises(ValidationError):
                build_sample(plan, {"o0": D[sigma]}, Y, "ipw", support=np.array([[1, 0], [1, 1]]))
            return
        b = build_sample(plan, {"o0": D[sigma]}, Y, "ipw", support=np.array([[1, 0], [1, 1]]))
        assert a.offices[0].cols == b.offices[0].cols
        for j in range(len(a.offices[0].cols)):
            assert np.array_equal(a.offices[0].column_multiset(j), b.offices[0].column_multiset(j))


def test_group_size_formula():
    for sizes in [(2,), (2, 3), (4, 1, 3)]:
        assert plan_of(sizes).group_size == math.prod(math.factorial(m) for m in sizes)
