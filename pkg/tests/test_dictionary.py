import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vcrn.corpus import Video, generate_synthetic_corpus
from vcrn.dictionary import (
    DICT_MAGIC, VideoDictionary, assign_frames, decode_dictionary, encode_dictionary, kmeans_fit,
    load_dictionary, nearest_center, pool_frames, save_dictionary,
)
from vcrn.errors import BadMagicError, ConfigError, DimensionError, TruncatedPayloadError, VersionMismatchError


def blobs(seed=0, n=200, sigma=0.1):
    rng = np.random.default_rng(seed)
    means = np.array([[0.0, 0.0, 0.0], [10.0, -5.0, 3.0]])
    labels = np.arange(2 * n) % 2
    return means[labels] + rng.normal(0.0, sigma, size=(2 * n, 3)), means, labels


class TestPool:
    def test_two_videos(self):
        videos = [Video(f"v{i}", np.full((3, 4), i), 2, 2) for i in range(2)]
        pool = pool_frames(videos)
        assert pool.shape == (6, 4)
        np.testing.assert_array_equal(pool[3:], 1.0)

    def test_single_video(self):
        v = Video("v", np.arange(8.0).reshape(2, 4), 2, 2)
        np.testing.assert_array_equal(pool_frames([v]), v.features)

    def test_synthetic_row_count(self):
        corpus = generate_synthetic_corpus(0, 7, 2, num_frames=5, d_a=3, d_m=3)
        assert pool_frames(corpus.videos).shape[0] == sum(v.num_frames for v in corpus.videos)

    def test_dim_mismatch(self):
        with pytest.raises(ConfigError):
            pool_frames([Video("a", np.zeros((2, 4)), 2, 2), Video("b", np.zeros((2, 5)), 2, 3)])


class TestKMeans:
    def test_single_center_is_mean(self):
        x = np.random.default_rng(1).normal(size=(50, 4))
        fitted = kmeans_fit(x, 1)
        np.testing.assert_allclose(fitted.centers[0], x.mean(axis=0), atol=1e-6)

    def test_two_blobs(self):
        sigma, n = 0.1, 200
        x, means, _ = blobs(n=n, sigma=sigma)
        fitted = kmeans_fit(x, 2, seed=3)
        order = np.argsort(fitted.centers[:, 0])
        assert np.abs(fitted.centers[order] - means).max() <= 3 * sigma / np.sqrt(n)

    def test_too_many_centers(self):
        with pytest.raises(ConfigError):
            kmeans_fit(np.zeros((3, 2)), 4)

    def test_centers_are_cluster_means(self):
        x = np.random.default_rng(2).normal(size=(300, 5))
        fitted = kmeans_fit(x, 6, max_iter=500, tol=0.0)
        labels = assign_frames(x, fitted)
        for j in range(fitted.M):
            np.testing.assert_allclose(fitted.centers[j], x[labels == j].mean(axis=0), atol=1e-5)

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 10_000), st.integers(1, 8))
    def test_objective_monotone(self, seed, m):
        x = np.random.default_rng(seed).normal(size=(60, 3))
        history = kmeans_fit(x, m, seed=seed).history
        assert all(b <= a + 1e-9 for a, b in zip(history, history[1:]))

    def test_empty_cluster_repaired(self):
        x, _, _ = blobs(n=50)
        init = np.array([[0.0, 0.0, 0.0], [10.0, -5.0, 3.0], [1000.0, 1000.0, 1000.0]])
        fitted = kmeans_fit(x, 3, init_centers=init)
        assert np.isfinite(fitted.centers).all()
        assert np.abs(fitted.centers).max() < 100
        assert len(set(assign_frames(x, fitted))) == 3

    def test_row_permutation_with_value_seeding(self):
        x = np.random.default_rng(4).normal(size=(120, 4))
        init = x[[3, 50, 77, 101]]
        perm = np.random.default_rng(5).permutation(len(x))
        a = kmeans_fit(x, 4, init_centers=init)
        b = kmeans_fit(x[perm], 4, init_centers=init)
        assert abs(a.objective - b.objective) <= 1e-6

    def test_seeded_fit_is_reproducible(self):
        x = np.random.default_rng(6).normal(size=(100, 3))
        assert np.array_equal(kmeans_fit(x, 5, seed=9).centers, kmeans_fit(x, 5, seed=9).centers)

    def test_normalize_flag(self):
        x = np.random.default_rng(7).normal(size=(40, 3)) * 5
        fitted = kmeans_fit(x, 1, normalize=True)
        unit = x / np.linalg.norm(x, axis=1, keepdims=True)
        np.testing.assert_allclose(fitted.centers[0], unit.mean(axis=0), atol=1e-6)


class TestNearestCenter:
    def test_exact_match(self):
        d = VideoDictionary(np.eye(5))
        assert nearest_center(np.eye(5)[3], d) == 3

    def test_tie_goes_to_lowest(self):
        d = VideoDictionary(np.array([[1.0, 0.0], [-1.0, 0.0]]))
        assert nearest_center(np.zeros(2), d) == 0

    def test_matches_exhaustive_scan(self):
        rng = np.random.default_rng(8)
        for _ in range(20):
            centers = rng.normal(size=(int(rng.integers(1, 12)), 4))
            x = rng.normal(size=4)
            best, best_d = 0, np.inf
            for j, c in enumerate(centers):
                dist = sum((a - b) ** 2 for a, b in zip(x, c))
                if dist < best_d:
                    best, best_d = j, dist
            assert nearest_center(x, VideoDictionary(centers)) == best

    def test_dim_mismatch(self):
        with pytest.raises(DimensionError):
            nearest_center(np.zeros(3), VideoDictionary(np.eye(2)))


class TestDictionaryFiles:
    def fitted(self):
        return kmeans_fit(np.random.default_rng(9).normal(size=(30, 6)), 4, seed=12)

    def test_round_trip(self, tmp_path):
        d = self.fitted()
        save_dictionary(d, tmp_path / "d.dict")
        back = load_dictionary(tmp_path / "d.dict")
        assert (back.M, back.d, back.seed, back.objective) == (4, 6, 12, d.objective)
        assert np.array_equal(back.centers, d.centers)

    def test_layout(self):
        buf = encode_dictionary(self.fitted())
        assert buf[:8] == DICT_MAGIC
        assert struct.unpack_from("<IIIQ", buf, 8) == (1, 4, 6, 12)
        assert len(buf) == 8 + 12 + 8 + 8 + 4 * 6 * 4

    def test_bad_magic(self):
        with pytest.raises(BadMagicError):
            decode_dictionary(b"VCRNFEAT" + encode_dictionary(self.fitted())[8:])

    def test_version(self):
        buf = bytearray(encode_dictionary(self.fitted()))
        buf[8:12] = struct.pack("<I", 2)
        with pytest.raises(VersionMismatchError):
            decode_dictionary(bytes(buf))

    def test_truncated(self):
        with pytest.raises(TruncatedPayloadError):
            decode_dictionary(encode_dictionary(self.fitted())[:-3])
