import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vbmtl.diffcore.optim import AdamW
from vbmtl.diffcore.tensor import Tensor
from vbmtl.weighting import (REGULARISER_FLOOR, DwaState, LossWeighting, UncertaintyState, WeightingError, druw_loss,
                             dwa_loss, dwa_weights, rruw_loss, uniform_loss, write_weight_trace)


def losses(*values):
    return [Tensor(v) for v in values]


def dwa_with_ratios(ratios, temperature=2.0):
    d = DwaState(len(ratios), temperature)
    d.push(np.ones(len(ratios)))
    d.push(np.asarray(ratios, dtype=float))
    return d


def scalar_dwa(ratios, T_):
    # independent scalar evaluation: K * exp(r_k / T) / sum_j exp(r_j / T)
    e = [math.exp(r / T_) for r in ratios]
    return [len(ratios) * v / sum(e) for v in e]


class TestUniform:
    def test_sum(self):
        assert uniform_loss(losses(0.2, 0.3, 0.5, 1.0)).item() == pytest.approx(2.0, abs=1e-15)

    def test_single_task_identity(self):
        assert uniform_loss(losses(0.37)).item() == 0.37

    def test_needs_a_task(self):
        with pytest.raises(WeightingError):
            uniform_loss([])


class TestDWA:
    def test_equal_ratios_give_ones(self):
        np.testing.assert_allclose(dwa_weights(dwa_with_ratios([1.3] * 4, 0.7)), 1.0, atol=1e-15)

    def test_two_task_example(self):
        w = dwa_weights(dwa_with_ratios([1.0, 2.0], 2.0))
        np.testing.assert_allclose(w, scalar_dwa([1.0, 2.0], 2.0), rtol=0, atol=1e-12)
        np.testing.assert_allclose(w, [0.7550813375962908, 1.2449186624037092], rtol=0, atol=1e-12)

    def test_hot_limit(self, rng):
        np.testing.assert_allclose(dwa_weights(dwa_with_ratios(rng.uniform(0.1, 10, 4), 1e6)), 1.0, atol=1e-4)

    def test_no_history_is_uniform_bitwise(self):
        ls = losses(0.31, 1.7, 0.05, 0.9)
        assert dwa_loss(ls, DwaState(4)).data.tobytes() == uniform_loss(ls).data.tobytes()
        one_epoch = DwaState(4)
        one_epoch.push([1, 2, 3, 4])
        assert dwa_loss(ls, one_epoch).data.tobytes() == uniform_loss(ls).data.tobytes()

    def test_weighted_example(self):
        assert dwa_loss(losses(0.5, 0.5), dwa_with_ratios([1.0, 2.0])).item() == pytest.approx(1.0, abs=1e-15)

    def test_nonpositive_history_rejected(self):
        with pytest.raises(WeightingError):
            dwa_weights(dwa_with_ratios([0.0, 1.0]))
        with pytest.raises(WeightingError):
            DwaState(2, temperature=0.0)

    def test_history_keeps_last_two(self):
        d = DwaState(2)
        for i in range(1, 5):
            d.push([i, i])
        assert [h[0] for h in d.history] == [3.0, 4.0]

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(0.01, 100), min_size=2, max_size=6), st.floats(0.1, 10), st.randoms(use_true_random=False))
    def test_permutation_equivariant(self, ratios, temp, random):
        perm = list(range(len(ratios)))
        random.shuffle(perm)
        w = dwa_weights(dwa_with_ratios(ratios, temp))
        wp = dwa_weights(dwa_with_ratios([ratios[i] for i in perm], temp))
        np.testing.assert_allclose(wp, w[perm], rtol=0, atol=1e-12)

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(0.01, 10), min_size=2, max_size=6), st.floats(0.5, 10), st.floats(-5, 5))
    def test_shift_invariant(self, ratios, temp, c):
        r = np.array(ratios)
        base = DwaState(len(r), temp, [np.ones(len(r)), r])
        shifted = DwaState(len(r), temp, [np.ones(len(r)), r + c]) if (r + c).min() > 0 else None
        if shifted is not None:
            np.testing.assert_allclose(dwa_weights(shifted), dwa_weights(base), rtol=0, atol=1e-12)

    def test_weights_carry_no_gradient(self):
        d = dwa_with_ratios([1.0, 3.0])
        ls = [Tensor(0.4, requires_grad=True), Tensor(0.9, requires_grad=True)]
        dwa_loss(ls, d).backward()
        np.testing.assert_allclose([l.grad for l in ls], dwa_weights(d), atol=1e-15)
        before = dwa_loss(losses(0.4, 0.9), d).item()
        d.history[-1] = np.array([2.0, 1.0])
        assert dwa_loss(losses(0.4, 0.9), d).item() != before


class TestRRUW:
    def test_alpha_one(self):
        u = UncertaintyState(3, phi=1.0)
        assert rruw_loss(losses(0.2, 0.5, 0.7), u).item() == pytest.approx(1.4 + 1.0, abs=1e-15)

    def test_two_task_example(self):
        u = UncertaintyState.from_alpha([1.0, math.e])
        expected = 1 + math.exp(-2) + math.log(3) + 0.0
        assert rruw_loss(losses(1.0, 1.0), u).item() == pytest.approx(expected, abs=1e-9)

    def test_positive_alpha_required(self):
        with pytest.raises(WeightingError):
            UncertaintyState.from_alpha([1.0, 0.0])
        with pytest.raises(WeightingError):
            UncertaintyState(2, phi=0.0)

    def test_constraint_zero_on_surface(self):
        u = UncertaintyState(2, phi=1.0, log_alpha=None)
        u.log_alpha.data = np.array([0.25, -0.75])
        assert u.constraint_gap() == 0.0

    def test_regulariser_floor(self):
        u = UncertaintyState.from_alpha([0.1, 1.0])  # 1 + log(0.01) < 0
        val = rruw_loss(losses(1.0, 1.0), u).item()
        assert np.isfinite(val)
        assert REGULARISER_FLOOR == 1e-6

    def test_alpha_gradient_example(self):
        from vbmtl.gradcheck import check

        s0 = np.log([0.7, 1.3])
        err = check(lambda t: rruw_loss([Tensor(1.1), Tensor(0.6)], UncertaintyState(2, 1.0, t[0])), [s0])
        assert err < 1e-4

    def test_training_alpha_shrinks_constraint_gap(self):
        u = UncertaintyState(4, phi=1.0)
        opt = AdamW([u.log_alpha], {"weighting": 1e-3}, weight_decay=0.0)
        fixed = losses(1.5, 1.2, 1.8, 1.4)
        gaps = [u.constraint_gap()]
        for _ in range(500):
            rruw_loss(fixed, u).backward()
            opt.step()
            gaps.append(u.constraint_gap())
        assert gaps[-1] < 0.1 * gaps[0]


class TestDRUW:
    def test_alpha_one_equal_ratios(self):
        u = UncertaintyState(3, phi=1.0)
        d = dwa_with_ratios([2.0, 2.0, 2.0])
        assert druw_loss(losses(0.2, 0.5, 0.7), u, d).item() == pytest.approx(2 * 1.4 + 1.0, abs=1e-15)

    def test_two_task_example(self):
        u = UncertaintyState.from_alpha([1.0, math.e])
        d = dwa_with_ratios([1.0, 2.0])
        rruw_part = 1 + math.exp(-2) + math.log(3)
        dwa_part = sum(scalar_dwa([1.0, 2.0], 2.0))  # lambda . L with L = (1, 1)
        assert druw_loss(losses(1.0, 1.0), u, d).item() == pytest.approx(rruw_part + dwa_part, abs=1e-6)
        assert druw_loss(losses(1.0, 1.0), u, d).item() == pytest.approx(4.233947571904722, abs=1e-9)

    def test_zero_mix_is_rruw(self):
        u = UncertaintyState.from_alpha([0.8, 1.7, 1.1])
        d = dwa_with_ratios([0.5, 1.0, 3.0])
        ls = losses(0.3, 0.6, 0.9)
        assert druw_loss(ls, u, d, mix=0.0).item() == rruw_loss(ls, u).item()


class TestLossWeighting:
    @pytest.mark.parametrize("strategy", ["uniform", "dwa", "rruw", "druw"])
    def test_parameters_and_state(self, strategy):
        w = LossWeighting(strategy, 4)
        assert len(w.parameters()) == (1 if strategy in ("rruw", "druw") else 0)
        w.end_epoch([1, 1, 1, 1])
        w.end_epoch([0.5, 1, 2, 1])
        clone = LossWeighting(strategy, 4)
        clone.load_state_dict(w.state_dict())
        np.testing.assert_array_equal(clone.lambdas(), w.lambdas())
        np.testing.assert_array_equal(clone.alphas(), w.alphas())

    def test_unknown_strategy(self):
        with pytest.raises(WeightingError):
            LossWeighting("gradnorm", 4)

    def test_trace_csv(self, tmp_path):
        path = tmp_path / "trace.csv"
        write_weight_trace([(1, "dwa", "type", 1.0, 1.0), (2, "dwa", "type", 0.75, 1.0)], path)
        assert path.read_text().splitlines() == ["epoch,strategy,task,lambda,alpha", "1,dwa,type,1.0,1.0",
                                                 "2,dwa,type,0.75,1.0"]
