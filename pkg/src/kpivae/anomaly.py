"""Loss-ranked anomaly detection and per-KPI attribution.

A timestep is anomalous when its evaluation loss (kl - loglik) is high;
the responsible KPI is read off the concept dimensions of the encoder mean.
Each concept dimension is standardized against the healthy per-cluster
distribution of that dimension, so a latent Z-score far above the threshold
names the KPI that moved.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .concepts import ConceptModel, assign_concept
from .data import KPI_NAMES, SequenceWindow, fmt_float
from .errors import ParseError, ValidationError
from .vae import VaeParams, batch_components, build_prior, encode_windows

LATENTSTATS_TAG = "kpivae-latentstats-v1"

# clusters with fewer healthy timesteps than this fall back to global stats
MIN_CLUSTER_TIMESTEPS = 30
STD_FLOOR = 1e-6
Z_THRESHOLD = 15.0

REPORT_HEADER = (
    ["rank", "element_id", "date", "cluster"]
    + list(KPI_NAMES)
    + ["loss", "loglik", "kl"]
    + [f"z_{name}" for name in KPI_NAMES]
    + ["flagged", "stats_fallback"]
)


@dataclass
class LatentStats:
    """Mean/std of per-timestep encoder means on healthy data, per concept dim.

    Clusters observed with fewer than `min_timesteps` timesteps are not given
    their own entry; lookups for them (and for unknown clusters) use the
    global statistics. Stds are population stds floored at STD_FLOOR.
    """

    concept_dims: int
    global_mean: np.ndarray  # (concept_dims,)
    global_std: np.ndarray
    cluster_mean: dict[int, np.ndarray]
    cluster_std: dict[int, np.ndarray]


@dataclass
class AnomalyReport:
    element_id: str
    date: int
    cluster: int
    kpis: tuple[float, ...]  # original units
    loss: float
    kl: float
    loglik: float
    zscores: tuple[float, ...]
    flagged: tuple[bool, ...]  # per KPI, z strictly above the threshold
    attribution: tuple[str, ...] = ()  # flagged KPI names, strongest first
    stats_fallback: bool = False  # cluster unknown/under-observed, global stats used
    rank: int = 0


def _floored_std(rows: np.ndarray) -> np.ndarray:
    return np.maximum(rows.std(axis=0), STD_FLOOR)


def fit_latent_stats(
    params: VaeParams,
    windows: list[SequenceWindow],
    assignment: dict[str, int],
    min_timesteps: int = MIN_CLUSTER_TIMESTEPS,
    encoded: list[tuple[np.ndarray, np.ndarray]] | None = None,
) -> LatentStats:
    """Standardization stats for concept dims, fitted on healthy windows.

    `encoded` may carry precomputed (mu, logvar) pairs aligned with `windows`
    to avoid re-encoding.
    """
    if not windows:
        raise ValidationError("cannot fit latent stats on zero windows")
    missing = sorted({w.element_id for w in windows if w.element_id not in assignment})
    if missing:
        raise ValidationError("elements without a cluster assignment: " + ", ".join(missing))
    c = params.latent.concept_dims
    if encoded is None:
        encoded = encode_windows(params, windows)
    by_cluster: dict[int, list[np.ndarray]] = {}
    for w, (mu, _) in zip(windows, encoded):
        by_cluster.setdefault(assignment[w.element_id], []).append(mu[:, :c])
    all_rows = np.concatenate([r for rows in by_cluster.values() for r in rows])
    stats = LatentStats(
        concept_dims=c,
        global_mean=all_rows.mean(axis=0),
        global_std=_floored_std(all_rows),
        cluster_mean={},
        cluster_std={},
    )
    for j, rows in by_cluster.items():
        m = np.concatenate(rows)
        if m.shape[0] >= min_timesteps:
            stats.cluster_mean[j] = m.mean(axis=0)
            stats.cluster_std[j] = _floored_std(m)
    return stats


def zscores(stats: LatentStats, cluster: int | None, mu) -> np.ndarray:
    """Standardize concept-dim encoder means against the cluster's stats.

    `mu` may be (concept_dims,), (T, latent) or anything whose trailing axis
    holds at least concept_dims entries; extra latent dims are ignored.
    Unknown or under-observed clusters use the global statistics.
    """
    m = np.asarray(mu, dtype=np.float64)[..., : stats.concept_dims]
    if cluster is not None and cluster in stats.cluster_mean:
        mean, std = stats.cluster_mean[cluster], stats.cluster_std[cluster]
    else:
        mean, std = stats.global_mean, stats.global_std
    return (m - mean) / std


def _flag_order(z: np.ndarray, threshold: float, symmetric: bool) -> list[int]:
    score = np.abs(z) if symmetric else z
    flagged = [i for i in range(z.size) if score[i] > threshold]
    flagged.sort(key=lambda i: (-score[i], i))
    return flagged


def attribute(report, threshold: float = Z_THRESHOLD, symmetric: bool = False) -> list[str]:
    """Names of the KPIs responsible for an anomaly, strongest first.

    A KPI is responsible when its Z-score strictly exceeds the threshold;
    one-sided by default, |z| when symmetric. Accepts an AnomalyReport or a
    raw Z-score vector.
    """
    z = report.zscores if isinstance(report, AnomalyReport) else report
    z = np.asarray(z, dtype=np.float64)
    return [KPI_NAMES[i] for i in _flag_order(z, threshold, symmetric)]


def _observed_profile(windows: list[SequenceWindow]) -> np.ndarray:
    # mean normalized KPI vector over the element's unique dates
    rows: dict[int, np.ndarray] = {}
    for w in windows:
        for t, d in enumerate(w.dates()):
            rows[int(d)] = w.values[t]
    return np.mean(list(rows.values()), axis=0)


def resolve_clusters(
    windows: list[SequenceWindow], model: ConceptModel
) -> dict[str, int]:
    """Cluster per element; elements unseen at fit time take the nearest centroid."""
    by_element: dict[str, list[SequenceWindow]] = {}
    for w in windows:
        by_element.setdefault(w.element_id, []).append(w)
    out: dict[str, int] = {}
    for eid, ws in by_element.items():
        if eid in model.assignment:
            out[eid] = model.assignment[eid]
        else:
            out[eid] = assign_concept(_observed_profile(ws), model)
    return out


def detect(
    params: VaeParams,
    windows: list[SequenceWindow],
    model: ConceptModel,
    stats: LatentStats,
    eval_samples: int = 10,
    seed: int = 0,
    loss_floor: float | None = None,
    top_k: int | None = None,
    z_threshold: float = Z_THRESHOLD,
    symmetric: bool = False,
    batch_size: int = 256,
) -> list[AnomalyReport]:
    """Score every timestep and return reports sorted by descending loss.

    Overlapping windows are deduplicated per (element_id, date), keeping the
    highest-loss occurrence. With `loss_floor` only timesteps whose loss is
    strictly above the floor survive; `top_k` then truncates the ranking.
    Neither filter set means every scored timestep is returned.
    """
    if not windows:
        return []
    windows = sorted(windows, key=lambda w: (w.element_id, w.start_date))
    clusters = resolve_clusters(windows, model)
    rng = np.random.default_rng(np.random.SeedSequence(seed))

    best: dict[tuple[str, int], tuple] = {}
    groups: dict[int, list[int]] = {}
    for i, w in enumerate(windows):
        groups.setdefault(w.length, []).append(i)
    for length in sorted(groups):
        idx = groups[length]
        for start in range(0, len(idx), batch_size):
            chunk = idx[start : start + batch_size]
            x = np.stack([windows[i].values for i in chunk])
            priors = np.stack(
                [
                    build_prior(model, params.latent, clusters[windows[i].element_id]).mean
                    for i in chunk
                ]
            )
            eps = rng.standard_normal(
                (eval_samples, len(chunk), length, params.latent.total)
            )
            mu, _, kl_ts, ll_ts = batch_components(
                params, x, priors, params.latent.prior_std, eps
            )
            loss_ts = kl_ts - ll_ts
            for j, i in enumerate(chunk):
                w = windows[i]
                for t, d in enumerate(w.dates()):
                    key = (w.element_id, int(d))
                    cand = (
                        float(loss_ts[j, t]),
                        float(kl_ts[j, t]),
                        float(ll_ts[j, t]),
                        mu[j, t].copy(),
                        tuple(float(v) for v in w.raw[t]),
                    )
                    if key not in best or cand[0] > best[key][0]:
                        best[key] = cand

    reports: list[AnomalyReport] = []
    for (eid, date), (loss, kl, ll, mu_t, raw) in best.items():
        cl = clusters[eid]
        z = zscores(stats, cl, mu_t)
        score = np.abs(z) if symmetric else z
        reports.append(
            AnomalyReport(
                element_id=eid,
                date=date,
                cluster=cl,
                kpis=raw,
                loss=loss,
                kl=kl,
                loglik=ll,
                zscores=tuple(float(v) for v in z),
                flagged=tuple(bool(s > z_threshold) for s in score),
                attribution=tuple(
                    KPI_NAMES[i] for i in _flag_order(z, z_threshold, symmetric)
                ),
                stats_fallback=cl not in stats.cluster_mean,
            )
        )
    reports.sort(key=lambda r: (-r.loss, r.element_id, r.date))
    if loss_floor is not None:
        reports = [r for r in reports if r.loss > loss_floor]
    if top_k is not None:
        reports = reports[:top_k]
    for rank, r in enumerate(reports, start=1):
        r.rank = rank
    return reports


def report_rows(reports: list[AnomalyReport]) -> list[list]:
    rows = [list(REPORT_HEADER)]
    for r in reports:
        rows.append(
            [r.rank, r.element_id, r.date, r.cluster]
            + [fmt_float(v) for v in r.kpis]
            + [fmt_float(r.loss), fmt_float(r.loglik), fmt_float(r.kl)]
            + [fmt_float(v) for v in r.zscores]
            + ["|".join(r.attribution), int(r.stats_fallback)]
        )
    return rows


def save_report(reports: list[AnomalyReport], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        csv.writer(fh, lineterminator="\n").writerows(report_rows(reports))


def save_latent_stats(stats: LatentStats, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(LATENTSTATS_TAG + "\n")
        fh.write(f"concept_dims {stats.concept_dims}\n")
        mean = " ".join(fmt_float(v) for v in stats.global_mean)
        std = " ".join(fmt_float(v) for v in stats.global_std)
        fh.write(f"global {mean} {std}\n")
        for j in sorted(stats.cluster_mean):
            mean = " ".join(fmt_float(v) for v in stats.cluster_mean[j])
            std = " ".join(fmt_float(v) for v in stats.cluster_std[j])
            fh.write(f"cluster {j} {mean} {std}\n")


def load_latent_stats(path) -> LatentStats:
    with open(path, encoding="utf-8") as fh:
        lines = [ln.rstrip("\n") for ln in fh if ln.strip()]
    if not lines or lines[0] != LATENTSTATS_TAG:
        raise ParseError(f"bad latent stats tag, expected {LATENTSTATS_TAG!r}", 1)
    concept_dims = None
    stats = None
    for line_no, ln in enumerate(lines[1:], start=2):
        parts = ln.split()
        if parts[0] == "concept_dims":
            concept_dims = int(parts[1])
        elif parts[0] == "global":
            if concept_dims is None or len(parts) != 1 + 2 * concept_dims:
                raise ParseError("bad global stats row", line_no)
            vals = [float(v) for v in parts[1:]]
            stats = LatentStats(
                concept_dims=concept_dims,
                global_mean=np.array(vals[:concept_dims]),
                global_std=np.array(vals[concept_dims:]),
                cluster_mean={},
                cluster_std={},
            )
        elif parts[0] == "cluster":
            if stats is None or len(parts) != 2 + 2 * concept_dims:
                raise ParseError("bad cluster stats row", line_no)
            j = int(parts[1])
            vals = [float(v) for v in parts[2:]]
            stats.cluster_mean[j] = np.array(vals[:concept_dims])
            stats.cluster_std[j] = np.array(vals[concept_dims:])
        else:
            raise ParseError(f"unknown row {parts[0]!r}", line_no)
    if stats is None:
        raise ParseError("missing global stats row")
    return stats
