import numpy as np
import pytest
from scipy.stats import ortho_group

from motiondd import metrics as M


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


class TestFID:
    def test_identical_sets(self, rng):
        A = rng.standard_normal((200, 6))
        assert M.fid(A, A) == pytest.approx(0.0, abs=1e-8)

    def test_mean_shift_identity_cov(self):
        v = np.array([1.0, -2.0, 0.5])
        assert M.frechet_distance(np.zeros(3), np.eye(3), v, np.eye(3)) == pytest.approx(v @ v, abs=1e-8)

    def test_diagonal_closed_form(self, rng):
        for _ in range(20):
            F = rng.integers(1, 8)
            s1, s2 = rng.uniform(0.01, 5, F), rng.uniform(0.01, 5, F)
            m1, m2 = rng.standard_normal(F), rng.standard_normal(F)
            expected = np.sum((np.sqrt(s1) - np.sqrt(s2)) ** 2) + np.sum((m1 - m2) ** 2)
            got = M.frechet_distance(m1, np.diag(s1), m2, np.diag(s2))
            assert got == pytest.approx(expected, abs=1e-10)

    def test_symmetry(self, rng):
        A = rng.standard_normal((100, 5))
        B = rng.standard_normal((80, 5)) @ rng.standard_normal((5, 5)) + 0.3
        assert M.fid(A, B) == pytest.approx(M.fid(B, A), abs=1e-8)

    def test_matches_scipy_sqrtm(self, rng):
        from scipy.linalg import sqrtm

        A = rng.standard_normal((60, 4))
        B = rng.standard_normal((70, 4)) * [1, 2, 0.5, 3]
        a, b = M.GaussianSummary.from_features(A), M.GaussianSummary.from_features(B)
        ref = np.sum((a.mean - b.mean) ** 2) + np.trace(a.cov + b.cov - 2 * sqrtm(a.cov @ b.cov).real)
        assert M.fid(A, B) == pytest.approx(ref, rel=1e-9)

    def test_rejects_non_psd(self):
        bad = np.diag([1.0, -0.5])
        with pytest.raises(ValueError, match="positive semidefinite"):
            M.frechet_distance(np.zeros(2), bad, np.zeros(2), np.eye(2))

    def test_needs_two_rows(self):
        with pytest.raises(ValueError):
            M.fid(np.zeros((1, 3)), np.zeros((5, 3)))


class TestMMDist:
    def test_identical(self, rng):
        A = rng.standard_normal((10, 4))
        assert M.mm_dist(A, A) == 0.0

    def test_single_pair(self):
        assert M.mm_dist([[0.0, 0.0]], [[3.0, 4.0]]) == pytest.approx(5.0)

    def test_direct_average(self, rng):
        A, B = rng.standard_normal((10, 7)), rng.standard_normal((10, 7))
        direct = sum(np.sqrt(sum((A[i, j] - B[i, j]) ** 2 for j in range(7))) for i in range(10)) / 10
        assert M.mm_dist(A, B) == pytest.approx(direct, abs=1e-12)

    def test_count_mismatch(self, rng):
        with pytest.raises(ValueError, match="differ in count"):
            M.mm_dist(rng.standard_normal((3, 2)), rng.standard_normal((4, 2)))


class TestRPrecision:
    def test_perfect_pairing(self, rng):
        A = rng.standard_normal((64, 8)) * 100
        assert M.r_precision(A, A, rng=rng)[0] == 1.0

    def test_chance_level(self, rng):
        n = 10_000
        m, t = rng.standard_normal((n, 64)), rng.standard_normal((n, 64))
        tops = M.r_precision(m, t, rng=rng)
        for k, v in zip((1, 2, 3), tops):
            p = k / 32
            assert abs(v - p) <= 3 * np.sqrt(p * (1 - p) / n)

    def test_monotone(self, rng):
        m, t = rng.standard_normal((50, 3)), rng.standard_normal((50, 3))
        a, b, c = M.r_precision(m, m + t, rng=rng)
        assert a <= b <= c

    def test_too_few_pairs(self, rng):
        with pytest.raises(ValueError):
            M.r_precision(np.zeros((31, 2)), np.zeros((31, 2)))


class TestDiversity:
    def test_identical_rows(self):
        assert M.diversity(np.ones((600, 4)), rng=0) == 0.0

    def test_two_points(self):
        d = 2.5
        X = np.zeros((2, 3))
        X[1, 0] = d
        assert M.diversity(X, subset=1, rng=0) == pytest.approx(d)

    def test_gaussian_mean_distance(self, rng):
        F = 16
        X = rng.standard_normal((20_000, F))
        got = M.diversity(X, subset=10_000, rng=rng)
        assert got == pytest.approx(M.expected_gaussian_distance(F), rel=0.05)

    def test_expected_distance_monte_carlo(self, rng):
        F = 5
        d = np.linalg.norm(rng.standard_normal((200_000, F)) - rng.standard_normal((200_000, F)), axis=1)
        assert d.mean() == pytest.approx(M.expected_gaussian_distance(F), rel=0.01)

    def test_too_small(self):
        with pytest.raises(ValueError):
            M.diversity(np.zeros((599, 2)))


class TestMModality:
    def test_identical_generations(self):
        feats = {"a": np.ones((30, 4)), "b": np.zeros((30, 4))}
        assert M.mmodality(feats, rng=0) == 0.0

    def test_hand_computed(self):
        # text a: 20 identical rows -> every distance 0
        # text b: 20 standard basis vectors -> every disjoint pair is sqrt(2) apart
        a = np.ones((20, 20))
        b = np.eye(20)
        # (10 * 0 + 10 * sqrt(2)) / (10 * 2)
        assert M.mmodality({"a": a, "b": b}, rng=0) == pytest.approx(np.sqrt(2) / 2, abs=1e-12)

    def test_permutation_invariant(self, rng):
        feats = {f"t{i}": rng.standard_normal((30, 3)) for i in range(4)}
        reordered = dict(reversed(list(feats.items())))
        assert M.mmodality(feats, rng=7) == M.mmodality(reordered, rng=7)

    def test_insufficient_rows(self):
        with pytest.raises(ValueError, match="need at least 20"):
            M.mmodality({"x": np.zeros((19, 2))})


class TestRotationInvariance:
    def test_all_metrics(self, rng):
        F = 6
        Q = ortho_group.rvs(F, random_state=3)
        real, gen, text = (rng.standard_normal((640, F)) for _ in range(3))
        per = {"a": rng.standard_normal((30, F)), "b": rng.standard_normal((30, F))}
        assert M.fid(real, gen) == pytest.approx(M.fid(real @ Q, gen @ Q), abs=1e-6)
        assert M.mm_dist(gen, text) == pytest.approx(M.mm_dist(gen @ Q, text @ Q), abs=1e-6)
        np.testing.assert_allclose(
            M.r_precision(gen, text, rng=1), M.r_precision(gen @ Q, text @ Q, rng=1), atol=1e-6
        )
        assert M.diversity(gen, rng=2) == pytest.approx(M.diversity(gen @ Q, rng=2), abs=1e-6)
        rotated = {k: v @ Q for k, v in per.items()}
        assert M.mmodality(per, rng=4) == pytest.approx(M.mmodality(rotated, rng=4), abs=1e-6)


def test_evaluation_protocol_shape(rng):
    real = rng.standard_normal((100, 4))
    pairs = rng.standard_normal((64, 4))

    def draw(r):
        gen = pairs + 0.1 * r.standard_normal(pairs.shape)
        return gen, pairs

    per = {"a": rng.standard_normal((30, 4))}
    rep = M.evaluation_protocol(real, draw, draw_multimodal=lambda r: per, seed=3)
    assert set(rep) == {"fid", "mm_dist", "top1", "top2", "top3", "diversity", "mmodality"}
    assert len(rep["fid"]["runs"]) == 20
    assert len(rep["mmodality"]["runs"]) == 5
    assert rep["fid"]["ci95"] > 0
    again = M.evaluation_protocol(real, draw, draw_multimodal=lambda r: per, seed=3)
    assert rep == again


def test_extractor_deterministic():
    ex1, ex2 = M.RandomProjectionExtractor(width=8, seed=5), M.RandomProjectionExtractor(width=8, seed=5)
    clips = [np.arange(40.0).reshape(10, 4), np.ones((6, 4))]
    np.testing.assert_array_equal(ex1.motion_features(clips), ex2.motion_features(clips))
    np.testing.assert_array_equal(ex1.text_features(["a man walks"]), ex2.text_features(["a man walks"]))
    assert ex1.text_features(["a man walks"]).shape == (1, 8)
