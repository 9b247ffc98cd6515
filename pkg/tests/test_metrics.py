import json

import numpy as np
import pytest

from volterra_edit.metrics import (
    MetricError,
    RunningMoments,
    embedding_similarity,
    evaluate_manifest,
    frechet_distance,
    frechet_from_stats,
    gaussian_stats,
    pixel_distance,
)


class TestPixelDistance:
    def test_identical_images(self, rng):
        img = rng.random((8, 8, 3))
        assert pixel_distance(img, img) == (0.0, 0.0)

    def test_maximal_difference(self):
        a = np.zeros((4, 4))
        b = np.ones((4, 4))
        assert pixel_distance(a, b) == (1.0, 1.0)

    def test_matches_loop_oracle(self, rng):
        a, b = rng.random((5, 6, 3)), rng.random((5, 6, 3))
        l1, l2 = pixel_distance(a, b)
        s1 = s2 = 0.0
        for i in range(5):
            for j in range(6):
                for c in range(3):
                    d = a[i, j, c] - b[i, j, c]
                    s1 += abs(d)
                    s2 += d * d
        n = 5 * 6 * 3
        assert abs(l1 - s1 / n) < 1e-12 and abs(l2 - s2 / n) < 1e-12

    def test_l2_bounded_by_l1_on_unit_range(self, rng):
        a, b = rng.random((8, 8)), rng.random((8, 8))
        l1, l2 = pixel_distance(a, b)
        assert 0 <= l2 <= l1 <= 1

    def test_shape_mismatch(self):
        with pytest.raises(MetricError):
            pixel_distance(np.zeros((2, 2)), np.zeros((3, 3)))


class TestSimilarity:
    def test_identical_unit_vectors(self):
        v = np.array([0.6, 0.8])
        assert embedding_similarity(v, v) == pytest.approx(1.0)

    def test_orthogonal(self):
        assert embedding_similarity([1, 0], [0, 1]) == pytest.approx(0.0)

    def test_antiparallel(self):
        assert embedding_similarity([1, 0], [-1, 0]) == pytest.approx(-1.0)


class TestRunningMoments:
    def test_matches_numpy(self, rng):
        x = rng.standard_normal((40, 5))
        acc = RunningMoments(5)
        for row in x:
            acc.update(row)
        np.testing.assert_allclose(acc.mean, x.mean(axis=0), atol=1e-12)
        np.testing.assert_allclose(acc.covariance, np.cov(x, rowvar=False), atol=1e-10)

    def test_merge_equals_single_pass(self, rng):
        x = rng.standard_normal((30, 4))
        a, b = RunningMoments(4), RunningMoments(4)
        for row in x[:11]:
            a.update(row)
        for row in x[11:]:
            b.update(row)
        a.merge(b)
        np.testing.assert_allclose(a.mean, x.mean(axis=0), atol=1e-12)
        np.testing.assert_allclose(a.covariance, np.cov(x, rowvar=False), atol=1e-10)


def exact_set(mu, var, n=4):
    """Tiny sample set with exactly the requested mean/covariance (diagonal)."""
    mu = np.atleast_1d(np.asarray(mu, dtype=float))
    var = np.atleast_1d(np.asarray(var, dtype=float))
    d = len(mu)
    assert n >= d + 1 and n % 2 == 0
    # orthogonal sign columns with zero mean, then scale to unbiased variance
    cols = []
    base = np.array([1.0, -1.0] * (n // 2))
    for j in range(d):
        col = np.roll(base, j) if j % 2 == 0 else np.repeat([1.0, -1.0], n // 2)
        cols.append(col)
    z = np.stack(cols, axis=1)[:, :d]
    # Gram-Schmidt to make columns exactly orthogonal with zero mean
    for j in range(d):
        for i in range(j):
            z[:, j] -= (z[:, j] @ z[:, i]) / (z[:, i] @ z[:, i]) * z[:, i]
        z[:, j] -= z[:, j].mean()
    for j in range(d):
        z[:, j] *= np.sqrt((n - 1) * var[j] / (z[:, j] @ z[:, j]))
    return z + mu


class TestFrechet:
    def test_identical_sets_zero(self, rng):
        x = rng.standard_normal((64, 8))
        assert frechet_distance(x, x) < 1e-6

    def test_d1_closed_form(self):
        # Sx = 1, Sy = 4, equal means: 1 + 4 - 2*sqrt(4) = 1
        a = 1.0 / np.sqrt(2.0)
        x = np.array([[-a], [a]])
        y = np.array([[-np.sqrt(2.0)], [np.sqrt(2.0)]])
        assert frechet_distance(x, y) == pytest.approx(1.0, abs=1e-9)

    def test_d2_mean_shift_exact(self):
        x = exact_set([0.0, 0.0], [1.0, 1.0], n=4)
        y = x + np.array([3.0, 4.0])
        # equal covariances, ||mu||^2 = 25
        assert frechet_distance(x, y) == pytest.approx(25.0, abs=1e-8)

    def test_d2_mean_shift_monte_carlo(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((10_000, 2))
        y = rng.standard_normal((10_000, 2)) + np.array([3.0, 4.0])
        assert frechet_distance(x, y) == pytest.approx(25.0, abs=0.5)

    def test_symmetry(self, rng):
        x = rng.standard_normal((50, 6))
        y = rng.standard_normal((60, 6)) * 1.7 + 0.3
        assert abs(frechet_distance(x, y) - frechet_distance(y, x)) < 1e-9

    def test_nonnegative(self, rng):
        for _ in range(10):
            x = rng.standard_normal((20, 4))
            y = rng.standard_normal((25, 4))
            assert frechet_distance(x, y) >= -1e-6

    def test_dimension_mismatch(self, rng):
        with pytest.raises(MetricError):
            frechet_distance(rng.standard_normal((5, 3)), rng.standard_normal((5, 4)))

    def test_too_few_samples(self, rng):
        with pytest.raises(MetricError):
            frechet_distance(rng.standard_normal((1, 3)), rng.standard_normal((5, 3)))

    def test_significant_negative_eigenvalue_is_error(self):
        bad = np.array([[1.0, 0.0], [0.0, -0.5]])
        with pytest.raises(MetricError, match="negative eigenvalue"):
            frechet_from_stats(np.zeros(2), bad, np.zeros(2), np.eye(2))

    def test_permutation_invariance(self, rng):
        x = rng.standard_normal((30, 4))
        y = rng.standard_normal((30, 4))
        perm = rng.permutation(30)
        assert frechet_distance(x, y) == pytest.approx(
            frechet_distance(x[perm], y), abs=1e-9)


class TestGaussianStats:
    def test_unbiased_covariance(self):
        x = np.array([[0.0], [2.0]])
        mu, cov = gaussian_stats(x)
        assert mu[0] == 1.0 and cov[0, 0] == pytest.approx(2.0)  # (1+1)/(2-1)

    def test_nonfinite_rejected(self):
        with pytest.raises(MetricError):
            gaussian_stats(np.array([[1.0], [np.inf]]))


@pytest.fixture()
def manifest_fixture(tmp_path, rng):
    from PIL import Image

    root = tmp_path
    (root / "images").mkdir()
    (root / "preds").mkdir()
    records = []
    for i in range(4):
        tgt = (rng.random((16, 16, 3)) * 255).astype(np.uint8)
        src = (rng.random((16, 16, 3)) * 255).astype(np.uint8)
        Image.fromarray(tgt).save(root / "images" / f"t{i}.png")
        Image.fromarray(src).save(root / "images" / f"s{i}.png")
        Image.fromarray(tgt).save(root / "preds" / f"sample-{i}.png")  # perfect editor
        records.append({
            "sample_id": f"sample-{i}", "task": "remove",
            "source_path": f"images/s{i}.png", "target_path": f"images/t{i}.png",
            "mask_path": f"images/t{i}.png",
            "instructions": [{"text": "remove the cat", "strategy": "simple"}],
            "object": {"label": "cat", "caption": "", "bbox": [0, 0, 4, 4],
                       "clip_pre": None, "clip_post": None, "area_fraction": 0.1},
            "provenance": {"pipeline_version": "1", "seed": 0},
        })
    (root / "manifest.jsonl").write_text(
        "\n".join(json.dumps(r) for r in records) + "\n")
    return root


class TestEvaluateManifest:
    def _providers(self):
        from volterra_edit.clients import load_clients

        emb = load_clients().embedder
        return {"clip": emb, "dino": emb, "id": "mock-hash-embedder"}

    def test_perfect_predictions(self, manifest_fixture):
        report = evaluate_manifest(manifest_fixture / "manifest.jsonl",
                                   manifest_fixture / "preds", self._providers())
        assert report.n_samples == 4
        assert report.l1 == 0.0 and report.l2 == 0.0
        assert report.clip_i == pytest.approx(1.0, abs=1e-6)
        assert report.dino == pytest.approx(1.0, abs=1e-6)
        assert report.fid == pytest.approx(0.0, abs=1e-6)
        assert report.missing == []

    def test_missing_prediction_counted(self, manifest_fixture):
        (manifest_fixture / "preds" / "sample-2.png").unlink()
        report = evaluate_manifest(manifest_fixture / "manifest.jsonl",
                                   manifest_fixture / "preds", self._providers())
        assert report.n_samples == 3
        assert report.missing == ["sample-2"]

    def test_report_files_written(self, manifest_fixture):
        out = manifest_fixture / "report" / "report.json"
        evaluate_manifest(manifest_fixture / "manifest.jsonl",
                          manifest_fixture / "preds", self._providers(),
                          report_path=out)
        data = json.loads(out.read_text())
        assert data["provider_id"] == "mock-hash-embedder"
        assert set(data["metrics"]) == {"l1", "l2", "clip_t", "clip_i", "dino", "fid"}
        assert out.with_suffix(".csv").exists()
