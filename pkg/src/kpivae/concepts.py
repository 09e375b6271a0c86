"""Concept extraction: cluster per-element KPI mean profiles with k-means.

Each cluster centroid, affinely rescaled from [0, 1] into [-1, 1], later
serves as the prior mean of one latent dimension per KPI.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import KpiRecord, N_KPIS, NormStats, normalize
from .errors import ParseError, ValidationError

CONCEPTS_TAG = "kpivae-concepts-v1"


@dataclass
class ElementProfile:
    element_id: str
    profile: np.ndarray  # (5,) per-KPI mean in normalized [0, 1] space


@dataclass
class ConceptModel:
    k: int
    centroids: np.ndarray  # (k, 5) in normalized profile space
    prior_means: np.ndarray | None  # (k, 5) in [-1, 1], filled by scale_centroids
    assignment: dict[str, int]
    inertia: float


def element_profiles(train: list[KpiRecord], stats: NormStats) -> list[ElementProfile]:
    """Arithmetic mean of each normalized KPI per element, sorted by id."""
    if not train:
        raise ValidationError("cannot build profiles from an empty dataset")
    sums: dict[str, np.ndarray] = {}
    counts: dict[str, int] = {}
    for r in train:
        v = normalize(np.asarray(r.kpis), stats)
        if r.element_id in sums:
            sums[r.element_id] += v
            counts[r.element_id] += 1
        else:
            sums[r.element_id] = v
            counts[r.element_id] = 1
    return [
        ElementProfile(eid, sums[eid] / counts[eid]) for eid in sorted(sums)
    ]


def _inertia(points: np.ndarray, centroids: np.ndarray, labels: np.ndarray) -> float:
    return float(((points - centroids[labels]) ** 2).sum())


def _assign(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    # squared Euclidean; np.argmin breaks ties toward the lowest index
    d2 = ((points[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
    return d2.argmin(axis=1)


def kmeans_pp_seed(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++ seeding: spread initial centroids proportionally to D^2."""
    n = points.shape[0]
    centroids = np.empty((k, points.shape[1]))
    first = int(rng.integers(n))
    centroids[0] = points[first]
    d2 = ((points - centroids[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            # all remaining points coincide with a chosen centroid
            centroids[j] = points[int(rng.integers(n))]
        else:
            probs = d2 / total
            centroids[j] = points[int(rng.choice(n, p=probs))]
        d2 = np.minimum(d2, ((points - centroids[j]) ** 2).sum(axis=1))
    return centroids


def lloyd(
    points: np.ndarray,
    centroids: np.ndarray,
    max_iter: int = 100,
    tol: float = 1e-9,
) -> tuple[np.ndarray, np.ndarray, float, list[float]]:
    """Lloyd iteration until assignment fixpoint, small shift, or max_iter.

    Empty clusters are re-seeded to the point farthest from its assigned
    centroid. Returns (centroids, labels, inertia, inertia history).
    """
    k = centroids.shape[0]
    centroids = centroids.copy()
    labels = _assign(points, centroids)
    history = [_inertia(points, centroids, labels)]
    for _ in range(max_iter):
        new_centroids = centroids.copy()
        for j in range(k):
            members = points[labels == j]
            if len(members):
                new_centroids[j] = members.mean(axis=0)
        empties = [j for j in range(k) if not (labels == j).any()]
        if empties:
            d2 = ((points - new_centroids[labels]) ** 2).sum(axis=1)
            taken: set[int] = set()
            for j in empties:
                order = np.argsort(-d2, kind="stable")
                far = next(int(i) for i in order if int(i) not in taken)
                taken.add(far)
                new_centroids[j] = points[far]
        shift = float(np.abs(new_centroids - centroids).max())
        centroids = new_centroids
        new_labels = _assign(points, centroids)
        history.append(_inertia(points, centroids, new_labels))
        converged = (new_labels == labels).all() and not empties
        labels = new_labels
        if converged or shift < tol:
            break
    return centroids, labels, history[-1], history


def kmeans_fit(
    profiles: list[ElementProfile],
    k: int,
    seed: int = 0,
    max_iter: int = 100,
    tol: float = 1e-9,
) -> ConceptModel:
    """Fit k-means on element profiles (k-means++ seeding, Lloyd iteration)."""
    if k < 1:
        raise ValidationError("k must be >= 1")
    if k > len(profiles):
        raise ValidationError(f"k={k} exceeds the number of profiles ({len(profiles)})")
    points = np.array([p.profile for p in profiles], dtype=np.float64)
    rng = np.random.default_rng(seed)
    centroids = kmeans_pp_seed(points, k, rng)
    centroids, labels, inertia, _ = lloyd(points, centroids, max_iter=max_iter, tol=tol)
    assignment = {p.element_id: int(labels[i]) for i, p in enumerate(profiles)}
    return ConceptModel(k=k, centroids=centroids, prior_means=None, assignment=assignment, inertia=inertia)


def scale_centroids(model: ConceptModel) -> ConceptModel:
    """Fill prior_means with the affine map 2c - 1 from [0,1] to [-1,1]."""
    c = model.centroids
    if c.min() < -1e-12 or c.max() > 1.0 + 1e-12:
        raise ValidationError(
            "centroids outside [0, 1]; profiles were not normalized before clustering"
        )
    model.prior_means = 2.0 * np.clip(c, 0.0, 1.0) - 1.0
    return model


def assign_concept(profile: np.ndarray, model: ConceptModel) -> int:
    """Index of the nearest centroid; ties break toward the lowest index."""
    d2 = ((model.centroids - np.asarray(profile)) ** 2).sum(axis=1)
    return int(d2.argmin())


@dataclass
class QualityReport:
    inertia: float
    sizes: dict[int, int]
    variances: dict[int, float]  # mean squared distance to centroid


def cluster_quality(model: ConceptModel, profiles: list[ElementProfile]) -> QualityReport:
    """Per-cluster size and variance plus total inertia, for elbow-style k picks."""
    points = np.array([p.profile for p in profiles], dtype=np.float64)
    labels = _assign(points, model.centroids)
    sizes = {}
    variances = {}
    inertia = 0.0
    for j in range(model.k):
        members = points[labels == j]
        sizes[j] = int(len(members))
        if len(members):
            sq = ((members - model.centroids[j]) ** 2).sum(axis=1)
            variances[j] = float(sq.mean())
            inertia += float(sq.sum())
        else:
            variances[j] = 0.0
    return QualityReport(inertia=inertia, sizes=sizes, variances=variances)


def save_concept_model(model: ConceptModel, path) -> None:
    if model.prior_means is None:
        raise ValidationError("cannot persist a model without prior_means; run scale_centroids")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(CONCEPTS_TAG + "\n")
        fh.write(f"k {model.k}\n")
        fh.write(f"inertia {model.inertia!r}\n")
        for j in range(model.k):
            row = [repr(float(v)) for v in model.centroids[j]]
            row += [repr(float(v)) for v in model.prior_means[j]]
            fh.write(f"centroid {j} " + " ".join(row) + "\n")
        for eid in sorted(model.assignment):
            fh.write(f"assign {eid} {model.assignment[eid]}\n")


def load_concept_model(path) -> ConceptModel:
    with open(path, encoding="utf-8") as fh:
        lines = [ln.rstrip("\n") for ln in fh if ln.strip()]
    if not lines or lines[0] != CONCEPTS_TAG:
        raise ParseError(f"bad concept model tag, expected {CONCEPTS_TAG!r}", 1)
    k = None
    inertia = 0.0
    centroids = {}
    priors = {}
    assignment: dict[str, int] = {}
    for line_no, ln in enumerate(lines[1:], start=2):
        parts = ln.split()
        if parts[0] == "k":
            k = int(parts[1])
        elif parts[0] == "inertia":
            inertia = float(parts[1])
        elif parts[0] == "centroid":
            j = int(parts[1])
            vals = [float(v) for v in parts[2:]]
            if len(vals) != 2 * N_KPIS:
                raise ParseError(f"centroid row needs {2 * N_KPIS} values", line_no)
            centroids[j] = vals[:N_KPIS]
            priors[j] = vals[N_KPIS:]
        elif parts[0] == "assign":
            assignment[parts[1]] = int(parts[2])
        else:
            raise ParseError(f"unknown row {parts[0]!r}", line_no)
    if k is None or len(centroids) != k:
        raise ParseError("missing k or centroid rows")
    cent = np.array([centroids[j] for j in range(k)])
    pm = np.array([priors[j] for j in range(k)])
    return ConceptModel(k=k, centroids=cent, prior_means=pm, assignment=assignment, inertia=inertia)


def quality_csv_rows(report: QualityReport) -> list[list]:
    rows = [["cluster", "size", "variance"]]
    for j in sorted(report.sizes):
        rows.append([j, report.sizes[j], repr(report.variances[j])])
    return rows
