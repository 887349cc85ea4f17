import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lplp import autodiff as ad
from lplp.bagdata import Bag, Instance
from lplp.llp import masked_proportion, ppl_loss, proportion_loss

Z = np.array([[0.6, 0.4], [0.2, 0.8]])


def val(node):
    return np.asarray(node.value)


class TestMaskedProportion:
    @pytest.mark.parametrize("s,expected", [((1.0, 1.0), (0.4, 0.6)), ((1.0, 0.0), (0.6, 0.4)),
                                            ((0.75, 0.25), (0.5, 0.5))])
    def test_worked_examples(self, s, expected):
        est = masked_proportion(np.array(s), Z)
        assert np.all(np.abs(val(est.p_hat) - expected) <= 1e-12)

    def test_scale_invariance(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            n = rng.integers(1, 33)
            s = rng.uniform(0.01, 1, size=n)
            z = rng.dirichlet(np.ones(3), size=n)
            base = val(masked_proportion(s, z).p_hat)
            for lam in (1.0, 0.5, 0.01):
                assert np.all(np.abs(val(masked_proportion(lam * s, z).p_hat) - base) <= 1e-9)

    def test_all_zero_mask_is_finite_and_flagged(self):
        est = masked_proportion(np.zeros(3), np.full((3, 2), 0.5))
        assert np.all(np.isfinite(val(est.p_hat))) and est.degenerate

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            masked_proportion(np.ones(3), Z)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(1, 20), st.integers(0, 2**32 - 1))
    def test_on_simplex_and_permutation_invariant(self, n, seed):
        rng = np.random.default_rng(seed)
        s = rng.uniform(0.01, 1, size=n)
        z = rng.dirichlet(np.ones(3), size=n)
        p = val(masked_proportion(s, z).p_hat)
        assert abs(p.sum() - 1) < 1e-12 and np.all(p >= 0)
        perm = rng.permutation(n)
        assert np.allclose(val(masked_proportion(s[perm], z[perm]).p_hat), p, atol=1e-14)


class TestProportionLoss:
    @pytest.mark.parametrize("p,q,expected", [((1, 0), (1, 0), 0.0),
                                              ((0.8, 0.2), (0.8, 0.2), 0.500402),
                                              ((0.8, 0.2), (0.2, 0.8), 1.332179)])
    def test_values(self, p, q, expected):
        assert float(val(proportion_loss(p, np.array(q, dtype=float)))) == pytest.approx(expected, abs=1e-6)

    def test_gibbs(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            C = rng.integers(2, 6)
            p, q = rng.dirichlet(np.ones(C)), rng.dirichlet(np.ones(C))
            H = -np.sum(p * np.log(p))
            assert float(val(proportion_loss(p, q))) >= H - 1e-9
            assert abs(float(val(proportion_loss(p, p))) - H) <= 1e-9

    def test_zero_estimate_finite(self):
        assert math.isfinite(float(val(proportion_loss([0.5, 0.5], np.array([1.0, 0.0])))))


def bag_of(n, label, p=None):
    return Bag(tuple(Instance(np.zeros(2), 0 if label == 0 else 1, i) for i in range(n)), label,
               None if p is None else np.array(p), 0)


class TestPpl:
    def test_negative_bag_perfect(self):
        probs = np.tile([0.0, 0.0, 1.0], (4, 1))
        assert float(val(ppl_loss(bag_of(4, 0), probs))) == pytest.approx(0, abs=1e-12)

    def test_renormalized_perfect(self):
        probs = np.tile([0.3, 0.0, 0.7], (2, 1))
        assert float(val(ppl_loss(bag_of(2, 1, [1.0, 0.0]), probs))) == pytest.approx(0, abs=1e-12)

    def test_renormalized_entropy(self):
        probs = np.tile([0.2, 0.2, 0.6], (2, 1))
        assert float(val(ppl_loss(bag_of(2, 1, [0.5, 0.5]), probs))) == pytest.approx(math.log(2), abs=1e-12)

    def test_ignore_mode_uses_raw_block(self):
        probs = np.tile([0.2, 0.2, 0.6], (2, 1))
        out = float(val(ppl_loss(bag_of(2, 1, [0.5, 0.5]), probs, positive_block="ignore")))
        assert out == pytest.approx(-math.log(0.2), abs=1e-12)


def test_gradient_flows_through_mask_to_every_block():
    from lplp.bagdata import synth_gaussian_dataset
    from lplp.mil import Mean
    from lplp.nets import ModelTriple
    from lplp.trainer import joint_loss
    data = synth_gaussian_dataset(2, 8, 6.0, 1, 1, 1, 1, 1, 1, 16, seed=3)
    pos = next(b for b in data.train if b.bag_label == 1)
    m = ModelTriple.init(8, 2, 1)
    tape = ad.Tape()
    bound, leaf = m.bind(tape)
    ad.backward(tape, joint_loss(m, pos, Mean, 0.0, tape, bound))
    sl = m.slices()
    # with w_mil = 0 the only route to g is the soft mask
    assert np.any(leaf.adjoint[sl["g"]] != 0)
    assert np.any(leaf.adjoint[sl["f"]] != 0) and np.any(leaf.adjoint[sl["h"]] != 0)
