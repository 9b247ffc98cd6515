"""Evaluation metrics: model-free L1/L2, embedding cosine similarities, and
the Fréchet distance between Gaussian fits of two embedding sets:

    d^2 = ||mu_x - mu_y||^2 + Tr(Sx + Sy - 2 (Sx Sy)^(1/2))

computed with unbiased covariances and an eigendecomposition of the
symmetrized product sqrt(Sx) Sy sqrt(Sx).
"""

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class MetricError(ValueError):
    pass


def pixel_distance(a, b):
    """(mean |a-b|, mean (a-b)^2) over [0,1]-scaled images."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise MetricError(f"image shapes differ: {a.shape} vs {b.shape}")
    diff = a - b
    return float(np.abs(diff).mean()), float((diff * diff).mean())


def embedding_similarity(a_vec, b_vec):
    a = np.asarray(a_vec, dtype=np.float64)
    b = np.asarray(b_vec, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise MetricError("zero vector has no direction")
    return float(np.dot(a, b) / (na * nb))


class RunningMoments:
    """Single-pass mergeable (count, mean, M2) accumulator; unbiased
    covariance via M2/(n-1). Merge order does not change the result beyond
    floating-point roundoff."""

    def __init__(self, dim):
        self.n = 0
        self.mean = np.zeros(dim)
        self.m2 = np.zeros((dim, dim))

    def update(self, x):
        x = np.asarray(x, dtype=np.float64)
        self.n += 1
        delta = x - self.mean
        self.mean += delta / self.n
        self.m2 += np.outer(delta, x - self.mean)

    def merge(self, other):
        if other.n == 0:
            return self
        if self.n == 0:
            self.n, self.mean, self.m2 = other.n, other.mean.copy(), other.m2.copy()
            return self
        n = self.n + other.n
        delta = other.mean - self.mean
        self.m2 = self.m2 + other.m2 + np.outer(delta, delta) * self.n * other.n / n
        self.mean = self.mean + delta * other.n / n
        self.n = n
        return self

    @property
    def covariance(self):
        if self.n < 2:
            raise MetricError("need at least 2 samples for a covariance")
        return self.m2 / (self.n - 1)


def gaussian_stats(vectors):
    vectors = np.asarray(vectors, dtype=np.float64)
    if vectors.ndim != 2 or vectors.shape[0] < 2:
        raise MetricError(f"need [N>=2, D] vectors, got shape {vectors.shape}")
    if not np.isfinite(vectors).all():
        raise MetricError("non-finite embedding values")
    acc = RunningMoments(vectors.shape[1])
    for v in vectors:
        acc.update(v)
    return acc.mean, acc.covariance


def _sym_sqrt(mat, eig_tol):
    """PSD square root via eigendecomposition; slightly negative eigenvalues
    are clamped, significantly negative ones are an error."""
    vals, vecs = np.linalg.eigh((mat + mat.T) / 2.0)
    floor = -eig_tol * max(1.0, float(np.abs(vals).max()))
    if vals.min() < floor:
        raise MetricError(f"matrix has significantly negative eigenvalue {vals.min():.3e}")
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def frechet_from_stats(mu_x, sigma_x, mu_y, sigma_y, eig_tol=1e-10):
    mu_x, mu_y = np.asarray(mu_x, float), np.asarray(mu_y, float)
    sigma_x = np.atleast_2d(np.asarray(sigma_x, float))
    sigma_y = np.atleast_2d(np.asarray(sigma_y, float))
    root_x = _sym_sqrt(sigma_x, eig_tol)
    inner = root_x @ sigma_y @ root_x  # symmetrized product, eigs real >= 0
    vals = np.linalg.eigvalsh((inner + inner.T) / 2.0)
    floor = -eig_tol * max(1.0, float(np.abs(vals).max()))
    if vals.min() < floor:
        raise MetricError(
            f"cross-covariance residue {vals.min():.3e} exceeds tolerance; refusing "
            "to silently discard it")
    tr_sqrt = float(np.sqrt(np.clip(vals, 0.0, None)).sum())
    mean_term = float(np.sum((mu_x - mu_y) ** 2))
    return mean_term + float(np.trace(sigma_x) + np.trace(sigma_y)) - 2.0 * tr_sqrt


def frechet_distance(x, y):
    """Fréchet distance between two embedding sets [N,D] (N >= 2 each)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 2 or y.ndim != 2 or x.shape[1] != y.shape[1]:
        raise MetricError(f"dimension mismatch: {x.shape} vs {y.shape}")
    mu_x, sx = gaussian_stats(x)
    mu_y, sy = gaussian_stats(y)
    return frechet_from_stats(mu_x, sx, mu_y, sy)


# ---------------------------------------------------------------------------
# manifest-level aggregation


@dataclass
class MetricReport:
    provider_id: str
    n_samples: int
    l1: float | None = None
    l2: float | None = None
    clip_t: float | None = None
    clip_i: float | None = None
    dino: float | None = None
    fid: float | None = None
    missing: list = field(default_factory=list)
    note: str = ("clip_t is reported raw; direction of improvement depends on "
                 "the task (lower for remove, higher for add)")

    def to_dict(self):
        return {
            "provider_id": self.provider_id,
            "n_samples": self.n_samples,
            "metrics": {"l1": self.l1, "l2": self.l2, "clip_t": self.clip_t,
                        "clip_i": self.clip_i, "dino": self.dino, "fid": self.fid},
            "missing": list(self.missing),
            "note": self.note,
        }


def evaluate_manifest(manifest_path, predictions_dir, providers,
                      report_path=None):
    """Aggregate metrics over a manifest; predictions are PNGs named
    `<sample_id>.png` under predictions_dir. `providers` maps
    {"clip": embedder, "dino": embedder}; CLIP-T pairs the prediction image
    with the first instruction text."""
    from PIL import Image

    manifest_path = Path(manifest_path)
    root = manifest_path.parent
    predictions_dir = Path(predictions_dir)
    records = [json.loads(l) for l in manifest_path.read_text().splitlines() if l]

    clip = providers["clip"]
    dino = providers.get("dino", clip)
    provider_id = providers.get("id", "mock-hash-embedder")

    rows, missing = [], []
    ref_clip, pred_clip = [], []
    for rec in records:
        pred_path = predictions_dir / f"{rec['sample_id']}.png"
        if not pred_path.exists():
            missing.append(rec["sample_id"])
            continue
        pred = np.asarray(Image.open(pred_path).convert("RGB"))
        target = np.asarray(Image.open(root / rec["target_path"]).convert("RGB"))
        l1, l2 = pixel_distance(pred / 255.0, target / 255.0)
        pred_c = clip.embed(pred)
        tgt_c = clip.embed(target)
        clip_i = embedding_similarity(pred_c, tgt_c)
        clip_t = embedding_similarity(pred_c, clip.embed(rec["instructions"][0]["text"]))
        dino_sim = embedding_similarity(dino.embed(pred), dino.embed(target))
        rows.append({"sample_id": rec["sample_id"], "task": rec["task"],
                     "l1": l1, "l2": l2, "clip_t": clip_t, "clip_i": clip_i,
                     "dino": dino_sim})
        ref_clip.append(tgt_c)
        pred_clip.append(pred_c)

    report = MetricReport(provider_id=provider_id, n_samples=len(rows), missing=missing)
    if rows:
        for key in ("l1", "l2", "clip_t", "clip_i", "dino"):
            setattr(report, key, float(np.mean([r[key] for r in rows])))
    if len(rows) >= 2:
        report.fid = frechet_distance(np.stack(ref_clip), np.stack(pred_clip))

    if report_path is not None:
        report_path = Path(report_path)
        report_path.parent.mkdir(parents=True, exist_ok=True)
        report_path.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True))
        with open(report_path.with_suffix(".csv"), "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=["sample_id", "task", "l1", "l2",
                                                   "clip_t", "clip_i", "dino"])
            writer.writeheader()
            writer.writerows(rows)
    return report
