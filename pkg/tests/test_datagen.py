import io as _io
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fcsim import datagen as dg
from fcsim import io


class TestMixture:
    def test_deterministic(self):
        a = dg.gen_mixture_classification(B=500, seed=3)
        b = dg.gen_mixture_classification(B=500, seed=3)
        assert a.checksum() == b.checksum()
        assert a.checksum() != dg.gen_mixture_classification(B=500, seed=4).checksum()

    def test_class_counts_concentrate(self):
        ds = dg.gen_mixture_classification(V_size=10, latent_dim=16, B=10_000, seed=0)
        counts = np.bincount(ds.targets, minlength=10)
        p = 0.1
        assert np.all(np.abs(counts - 1000) <= 3 * math.sqrt(10_000 * p * (1 - p)))

    def test_centralised_oracle(self):
        ds = dg.gen_mixture_classification(separation=8.0, noise_std=0.1, seed=1)
        assert dg.nearest_mean_accuracy(ds) >= 0.99

    def test_class_means_equidistant(self):
        mu = dg.class_means(4, 16, 6.0, 0)
        d = np.linalg.norm(mu[:, None] - mu[None], axis=2)
        np.testing.assert_allclose(d[~np.eye(4, dtype=bool)], 6.0, rtol=1e-12)

    def test_windows_cover_and_overlap(self):
        w = dg.view_windows(4, 16, 8, 0.25)
        assert np.unique(np.concatenate(w)).size == 16
        assert all(len(x) == 8 for x in w)
        assert len(np.intersect1d(w[0], w[1])) > 0

    @pytest.mark.parametrize("args", [(2, 16, 4, 0.0), (4, 16, 8, 1.0), (1, 16, 20, 0.5)])
    def test_windows_reject(self, args):
        with pytest.raises(ValueError):
            dg.view_windows(*args)

    def test_views_share_latent(self):
        ds = dg.gen_mixture_classification(B=2000, noise_std=0.05, seed=2)
        u = dg.reconstruct_latent(ds)
        # each coordinate is seen by at least one node; error std is at most noise_std
        assert np.sqrt(np.mean((u - ds.latents) ** 2)) <= 0.05 * 1.1
        for x, w in zip(ds.views, ds.windows):
            assert np.std(x - ds.latents[:, w]) == pytest.approx(0.05, rel=0.05)

    def test_labels_reach_every_node(self):
        ds = dg.gen_mixture_classification(B=100, seed=0)
        xs, v = ds.part("train")
        assert len(xs) == ds.n_nodes and all(x.shape[0] == v.shape[0] for x in xs)


class TestNomographic:
    def test_values(self):
        assert dg.nomographic_value([[2.0, 3.0]], "product")[0] == 6.0
        assert dg.nomographic_value([[1.0, 1.0, 1.0]], "product")[0] == 1.0
        assert dg.nomographic_value([[1.0, 1.0]], "geometric_mean")[0] == 1.0
        assert dg.nomographic_value([[1.0, 4.0]], "geometric_mean")[0] == pytest.approx(2.0, abs=1e-15)

    def test_rejects(self):
        with pytest.raises(ValueError):
            dg.nomographic_value([[0.0, 1.0]], "product")
        with pytest.raises(ValueError):
            dg.nomographic_value([[1.0, 1.0]], "sum")

    def test_generator(self):
        ds = dg.gen_nomographic_regression(N=3, B=300, seed=1, fn="geometric_mean")
        x = np.concatenate(ds.views, axis=1)
        assert x.shape == (300, 3) and x.min() >= 0.5 and x.max() <= 1.5
        np.testing.assert_allclose(ds.targets[:, 0], np.cbrt(np.prod(x, axis=1)), rtol=1e-14)


class TestSplit:
    def test_sizes(self):
        tags = dg.assign_splits(1000, (0.8, 0.1, 0.1), 0)
        assert [(tags == t).sum() for t in dg.SPLITS] == [800, 100, 100]

    @given(st.integers(10, 2000), st.integers(0, 1000))
    def test_partition(self, b, seed):
        tags = dg.assign_splits(b, (0.8, 0.1, 0.1), seed)
        idx = np.concatenate([np.flatnonzero(tags == t) for t in dg.SPLITS])
        np.testing.assert_array_equal(np.sort(idx), np.arange(b))
        np.testing.assert_array_equal(tags, dg.assign_splits(b, (0.8, 0.1, 0.1), seed))

    @pytest.mark.parametrize("fr", [(0.5, 0.5), (0.9, 0.2, -0.1), (0.5, 0.2, 0.2), (0.0, 0.5, 0.5)])
    def test_degenerate(self, fr):
        with pytest.raises(ValueError):
            dg.assign_splits(100, fr, 0)


class TestFile:
    @pytest.mark.parametrize("make", [
        lambda: dg.gen_mixture_classification(B=60, seed=5),
        lambda: dg.gen_nomographic_regression(N=2, B=40, seed=2),
    ])
    def test_round_trip(self, make):
        ds = make()
        buf = _io.StringIO()
        io.write_dataset(ds, buf)
        buf.seek(0)
        back = io.read_dataset(buf)
        assert back.checksum() == ds.checksum()
        assert back.params == ds.params

    def test_header_is_json_line(self):
        buf = _io.StringIO()
        io.write_dataset(dg.gen_nomographic_regression(B=10), buf)
        first, second = buf.getvalue().splitlines()[:2]
        assert first.startswith("{") and second.split(",")[:4] == ["id", "split", "v0", "x0_0"]

    def test_bad_columns(self):
        buf = _io.StringIO()
        io.write_dataset(dg.gen_nomographic_regression(B=10), buf)
        lines = buf.getvalue().splitlines()
        lines[1] = lines[1].replace("x0_0", "y")
        with pytest.raises(io.FormatError):
            io.read_dataset(_io.StringIO("\n".join(lines) + "\n"))
