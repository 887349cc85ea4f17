import itertools
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lplp import bagdata
from lplp.bagdata import (Bag, ConfigurationError, DatasetFormatError, GenerationError, Instance,
                          InstancePool, compose_bag, compose_negative_bag, full_proportion_from_partial,
                          largest_remainder, load_dataset, sample_partial_proportions, save_dataset,
                          synth_gaussian_dataset)


def apportion_oracle(total, proportions):
    """Brute force: floor/ceil vectors summing to total, least squared deviation.

    Ties go to the vector that favours lower class indices.
    """
    quotas = [total * p for p in proportions]
    cands = [c for c in itertools.product(*[(int(np.floor(q)), int(np.ceil(q))) for q in quotas])
             if sum(c) == total]
    cost = lambda c: round(sum((a - q) ** 2 for a, q in zip(c, quotas)), 9)
    return list(min(cands, key=lambda c: (cost(c), [-a for a in c])))


def make_pool(per_class=100, C=2, d=3):
    rng = np.random.default_rng(5)
    pool, nid = {}, 0
    for c in range(C + 1):
        pool[c] = []
        for _ in range(per_class):
            pool[c].append(Instance(rng.normal(size=d) + c, c, nid))
            nid += 1
    return pool


class TestProportions:
    def test_simplex_membership(self):
        p = sample_partial_proportions(2, 11)
        assert np.all(p >= 0) and abs(p.sum() - 1) <= 1e-9

    def test_dirichlet_mean(self):
        rng = np.random.default_rng(0)
        draws = np.array([sample_partial_proportions(3, rng) for _ in range(10_000)])
        assert np.all(np.abs(draws.mean(axis=0) - 1 / 3) < 0.02)

    def test_deterministic(self):
        assert np.array_equal(sample_partial_proportions(4, 3), sample_partial_proportions(4, 3))

    def test_needs_two_classes(self):
        with pytest.raises(ConfigurationError):
            sample_partial_proportions(1, 0)

    def test_full_from_partial_worked_example(self):
        assert np.allclose(full_proportion_from_partial([0.8, 0.2], 0.5), [0.4, 0.1, 0.5], atol=1e-15)

    def test_full_from_partial_edges(self):
        assert np.array_equal(full_proportion_from_partial([0.3, 0.7], 0.0), [0.3, 0.7, 0.0])
        assert np.array_equal(full_proportion_from_partial([0.3, 0.7], 1.0), [0.0, 0.0, 1.0])

    @given(st.lists(st.floats(0.0, 1.0), min_size=2, max_size=6), st.floats(0.0, 1.0))
    def test_full_sums_to_one(self, raw, p_neg):
        raw = np.array(raw)
        if raw.sum() == 0:
            return
        full = full_proportion_from_partial(raw / raw.sum(), p_neg)
        assert abs(full.sum() - 1) < 1e-12


class TestApportionment:
    @pytest.mark.parametrize("total,p", [(32, [0.75, 0.25]), (16, [0.8, 0.2]),
                                         (29, [0.5, 0.3, 0.2]), (7, [1 / 3] * 3)])
    def test_matches_oracle(self, total, p):
        assert largest_remainder(total, p).tolist() == apportion_oracle(total, p)

    @settings(max_examples=200)
    @given(st.integers(1, 64), st.lists(st.floats(0.01, 1.0), min_size=2, max_size=5))
    def test_properties(self, total, raw):
        p = np.array(raw) / np.sum(raw)
        counts = largest_remainder(total, p)
        assert counts.sum() == total
        assert np.all(np.abs(counts - total * p) < 1)


class TestComposeBag:
    def test_no_negatives(self):
        bag = compose_bag(make_pool(), 32, [0.75, 0.25], 0.0, 1)
        assert np.bincount(bag.true_labels, minlength=3).tolist() == [0, 24, 8]
        assert bag.bag_label == 1

    def test_degenerate_proportion(self):
        bag = compose_bag(make_pool(), 32, [1.0, 0.0], 0.5, 1)
        assert np.bincount(bag.true_labels, minlength=3).tolist() == [16, 16, 0]
        assert bag.partial_proportions.tolist() == [1.0, 0.0]

    def test_rounding_case(self):
        bag = compose_bag(make_pool(), 32, [0.8, 0.2], 0.5, 1)
        # largest remainder on quotas (12.8, 3.2)
        assert np.bincount(bag.true_labels, minlength=3).tolist() == [16, 13, 3]
        assert bag.partial_proportions.tolist() == [13 / 16, 3 / 16]

    def test_pool_exhaustion_names_class(self):
        with pytest.raises(GenerationError, match="class 2"):
            compose_bag(make_pool(per_class=5), 32, [0.0, 1.0], 0.0, 1)

    def test_draws_without_replacement(self):
        pool = InstancePool(make_pool(per_class=40))
        a = compose_bag(pool, 32, [0.5, 0.5], 0.25, 1)
        b = compose_bag(pool, 32, [0.5, 0.5], 0.25, 2)
        assert not ({x.id for x in a.instances} & {x.id for x in b.instances})

    def test_negative_bag(self):
        bag = compose_negative_bag(make_pool(), 32, 3)
        assert len(bag) == 32 and bag.bag_label == 0 and bag.partial_proportions is None
        assert set(bag.true_labels.tolist()) == {0}

    def test_singleton_negative_bag(self):
        assert len(compose_negative_bag(make_pool(), 1, 3)) == 1

    def test_negative_bag_deterministic(self):
        ids = lambda: [x.id for x in compose_negative_bag(make_pool(), 10, 9).instances]
        assert ids() == ids()

    def test_invalid_proportions_rejected(self):
        inst = (Instance(np.zeros(2), 1, 0),)
        with pytest.raises(ValueError, match="bag 7"):
            Bag(inst, 1, np.array([0.5, 0.4]), 7)


@pytest.fixture(scope="module")
def small():
    return synth_gaussian_dataset(2, 8, 6.0, 20, 20, 5, 5, 5, 2, 32, seed=4)


class TestSynth:
    def test_split_sizes(self):
        ds = synth_gaussian_dataset(2, 8, 6.0, 400, 400, 100, 100, 100, 10, 32, seed=1)
        assert (len(ds.train), len(ds.validation), len(ds.test)) == (800, 200, 110)
        assert sum(b.bag_label for b in ds.train) == 400
        assert sum(b.bag_label for b in ds.test) == 100

    def test_invariants(self, small):
        ids = {}
        for name in ("train", "validation", "test"):
            for bag in small.split(name):
                assert len(bag) == 32
                labels = bag.true_labels
                if bag.bag_label == 0:
                    assert np.all(labels == 0)
                else:
                    counts = np.bincount(labels, minlength=3)[1:]
                    n_pos = counts.sum()
                    # stored proportions are the realized counts, exactly
                    for c in range(2):
                        assert Fraction(bag.partial_proportions[c]) == Fraction(counts[c] / n_pos)
                    assert 0.2 * 32 - 1 <= 32 - n_pos <= 0.7 * 32 + 1
                for x in bag.instances:
                    assert ids.setdefault(x.id, name) == name

    def test_pairwise_mean_distance(self):
        means = bagdata.simplex_means(4, 8, 6.0)
        for i, j in itertools.combinations(range(4), 2):
            assert np.linalg.norm(means[i] - means[j]) == pytest.approx(6.0, abs=1e-12)

    def test_separable_data_linear_probe(self, small):
        # nearest-centroid probe fitted on true labels is a linear classifier
        X = np.concatenate([b.features for b in small.train])
        y = np.concatenate([b.true_labels for b in small.train])
        centroids = np.stack([X[y == c].mean(axis=0) for c in range(3)])
        Xt = np.concatenate([b.features for b in small.test + small.validation])
        yt = np.concatenate([b.true_labels for b in small.test + small.validation])
        pred = np.argmin(((Xt[:, None, :] - centroids[None]) ** 2).sum(-1), axis=1)
        assert np.mean(pred == yt) > 0.99

    def test_zero_separation_is_chance(self):
        ds = synth_gaussian_dataset(2, 8, 0.0, 30, 30, 5, 5, 30, 5, 32, seed=2)
        X = np.concatenate([b.features for b in ds.train])
        y = np.concatenate([b.true_labels for b in ds.train])
        centroids = np.stack([X[y == c].mean(axis=0) for c in range(3)])
        Xt = np.concatenate([b.features for b in ds.test])
        yt = np.concatenate([b.true_labels for b in ds.test])
        pred = np.argmin(((Xt[:, None, :] - centroids[None]) ** 2).sum(-1), axis=1)
        # best constant guess would score the majority-class share
        majority = np.bincount(yt).max() / yt.size
        assert np.mean(pred == yt) < majority

    def test_bad_counts(self):
        with pytest.raises(ConfigurationError):
            synth_gaussian_dataset(n_train_pos=0)


class TestPersistence:
    def test_round_trip(self, small, tmp_path):
        path = tmp_path / "d.lplp"
        save_dataset(small, path)
        back = load_dataset(path)
        assert back == small
        for a, b in zip(small.train, back.train):
            assert a.features.tobytes() == b.features.tobytes()

    def test_byte_identical_per_seed(self, tmp_path):
        for k in range(2):
            save_dataset(synth_gaussian_dataset(2, 4, 6.0, 3, 3, 1, 1, 1, 1, 8, seed=9), tmp_path / f"{k}")
        assert (tmp_path / "0").read_bytes() == (tmp_path / "1").read_bytes()

    def test_truncated(self, small, tmp_path):
        path = tmp_path / "d.lplp"
        save_dataset(small, path)
        text = path.read_text()
        for cut in (len(text) // 3, len(text) - 10, len(text) - 1 - len("end\t0\t0")):
            (tmp_path / "t.lplp").write_text(text[:cut])
            with pytest.raises(DatasetFormatError):
                load_dataset(tmp_path / "t.lplp")

    def test_bad_proportions_cite_bag(self, small, tmp_path):
        path = tmp_path / "d.lplp"
        save_dataset(small, path)
        lines = path.read_text().splitlines()
        k = next(i for i, ln in enumerate(lines) if ln.startswith("bag\t") and not ln.endswith("none"))
        rec = lines[k].split("\t")
        rec[4] = "0.5,0.4"
        lines[k] = "\t".join(rec)
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(DatasetFormatError, match=f"bag {rec[2]}"):
            load_dataset(path)

    def test_garbage_field_reports_line(self, small, tmp_path):
        path = tmp_path / "d.lplp"
        save_dataset(small, path)
        lines = path.read_text().splitlines()
        rec = lines[5].split("\t")
        rec[6] = "abc"
        lines[5] = "\t".join(rec)
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(DatasetFormatError, match="line 6"):
            load_dataset(path)
