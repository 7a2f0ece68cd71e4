import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from transmia.data import (LabeledDataset, SynthConfig, class_means, load_table, save_table,
                           split_four_way, stratified_sample, synth_generate)
from transmia.errors import IntegrityError, ParseError, RejectedInputError, RejectedSplitError
from transmia.nn import TrainConfig, accuracy, init_net, train


def four_class(n_per=100):
    return synth_generate(SynthConfig(class_count=4, dim=3, points_per_class=n_per, seed=1))


class TestLabeledDataset:
    def test_duplicate_ids(self):
        with pytest.raises(IntegrityError):
            LabeledDataset(np.array([1, 1]), np.zeros((2, 2)), np.array([0, 1]), 2)

    def test_label_range(self):
        with pytest.raises(RejectedInputError):
            LabeledDataset(np.array([1, 2]), np.zeros((2, 2)), np.array([0, 2]), 2)

    def test_shape_mismatch(self):
        with pytest.raises(RejectedInputError):
            LabeledDataset(np.array([1, 2]), np.zeros((3, 2)), np.array([0, 1]), 2)

    def test_arrays_are_read_only(self):
        d = four_class(5)
        with pytest.raises(ValueError):
            d.X[0, 0] = 1.0


class TestSplit:
    def test_counts_per_class(self):
        parts = split_four_way(four_class(), (40, 40, 100, 100), seed=0)
        assert [len(p) for p in parts] == [40, 40, 100, 100]
        for p, per in zip(parts, (10, 10, 25, 25)):
            assert p.class_counts().tolist() == [per] * 4

    def test_pairwise_disjoint(self):
        parts = split_four_way(four_class(), (40, 40, 100, 100), seed=0)
        ids = np.concatenate([p.ids for p in parts])
        assert len(set(ids.tolist())) == len(ids)

    def test_same_seed_same_split(self):
        a = split_four_way(four_class(), (40, 40, 100, 100), seed=5)
        b = split_four_way(four_class(), (40, 40, 100, 100), seed=5)
        c = split_four_way(four_class(), (40, 40, 100, 100), seed=6)
        assert all(np.array_equal(x.ids, y.ids) for x, y in zip(a, b))
        assert not all(np.array_equal(x.ids, y.ids) for x, y in zip(a, c))

    @given(per=st.lists(st.integers(0, 25), min_size=4, max_size=4), seed=st.integers(0, 10**6))
    def test_stratified_property(self, per, seed):
        data = four_class()
        sizes = [4 * p for p in per]
        parts = split_four_way(data, sizes, seed)
        seen = set()
        for part, p in zip(parts, per):
            assert part.class_counts().tolist() == [p] * 4
            ids = part.id_set()
            assert not ids & seen
            seen |= ids

    @given(sizes=st.lists(st.integers(0, 120), min_size=4, max_size=4), seed=st.integers(0, 10**6))
    def test_unstratified_property(self, sizes, seed):
        data = four_class()
        if sum(sizes) > len(data):
            with pytest.raises(RejectedSplitError):
                split_four_way(data, sizes, seed, stratified=False)
            return
        parts = split_four_way(data, sizes, seed, stratified=False)
        assert [len(p) for p in parts] == sizes
        ids = np.concatenate([p.ids for p in parts])
        assert len(set(ids.tolist())) == len(ids)

    @pytest.mark.parametrize("sizes", [(41, 40, 100, 100), (200, 200, 0, 4), (4, 4, 4)])
    def test_infeasible(self, sizes):
        with pytest.raises(RejectedSplitError):
            split_four_way(four_class(), sizes, seed=0)

    def test_stratified_sample(self):
        part = stratified_sample(four_class(), 20, seed=1)
        assert part.class_counts().tolist() == [5] * 4


class TestSynth:
    def test_same_seed_bitwise(self):
        cfg = SynthConfig(seed=4)
        a, b = synth_generate(cfg), synth_generate(cfg)
        assert a.X.tobytes() == b.X.tobytes() and np.array_equal(a.y, b.y)

    def test_class_means_within_three_sigma(self):
        cfg = SynthConfig(class_count=5, dim=8, points_per_class=400, noise_sigma=0.7, seed=2)
        data, mu = synth_generate(cfg), class_means(cfg)
        bound = 3 * cfg.noise_sigma / np.sqrt(cfg.points_per_class)
        for c in range(cfg.class_count):
            emp = data.X[data.y == c].mean(axis=0)
            assert np.all(np.abs(emp - mu[c]) <= bound)

    def test_means_have_requested_scale(self):
        mu = class_means(SynthConfig(class_mean_scale=3.5, seed=8))
        np.testing.assert_allclose(np.linalg.norm(mu, axis=1), 3.5)

    def test_tiny_noise_nearest_centroid_is_perfect(self):
        cfg = SynthConfig(noise_sigma=1e-6, seed=3)
        data, mu = synth_generate(cfg), class_means(cfg)
        nearest = np.argmin(((data.X[:, None, :] - mu[None]) ** 2).sum(-1), axis=1)
        assert np.mean(nearest == data.y) == 1.0

    def test_linear_model_reaches_090(self):
        data = synth_generate(SynthConfig(class_count=10, dim=16, points_per_class=100,
                                          class_mean_scale=2.0, noise_sigma=0.3, seed=0))
        fit, _, held, _ = split_four_way(data, (500, 0, 500, 0), seed=0)
        net = train(init_net([16, 10], seed=0), fit, TrainConfig(epochs=50, learning_rate=0.05))
        assert accuracy(net, held) >= 0.9

    @pytest.mark.parametrize("kwargs", [dict(noise_sigma=0.0), dict(class_count=0), dict(dim=0)])
    def test_invalid_config(self, kwargs):
        with pytest.raises(RejectedInputError):
            SynthConfig(**kwargs)


class TestTable:
    def test_three_rows(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("a,0,1.0,2.0\nb,1,3.0,4.0\nc,0,5.0,6.0\n")
        d = load_table(p)
        assert len(d) == 3 and d.dim == 2 and d.num_classes == 2
        assert d.ids.tolist() == ["a", "b", "c"]

    def test_header_and_numeric_ids(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("id,label,f_0\n7,2,0.5\n8,0,1.5\n")
        d = load_table(p)
        assert d.ids.tolist() == [7, 8] and d.y.tolist() == [2, 0] and d.num_classes == 3

    def test_short_row_names_the_row(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("a,0,1.0,2.0\nb,1,3.0\n")
        with pytest.raises(ParseError, match=":2:"):
            load_table(p)

    def test_non_integer_label(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("a,zero,1.0\n")
        with pytest.raises(ParseError, match=":1:"):
            load_table(p)

    def test_duplicate_id(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("a,0,1.0\na,1,2.0\n")
        with pytest.raises(IntegrityError):
            load_table(p)

    def test_round_trip(self, tmp_path):
        d = synth_generate(SynthConfig(class_count=3, dim=4, points_per_class=5, seed=1))
        save_table(d, tmp_path / "s.csv")
        back = load_table(tmp_path / "s.csv", num_classes=3)
        assert np.array_equal(back.ids, d.ids) and np.array_equal(back.y, d.y)
        assert back.X.tobytes() == d.X.tobytes()
