"""Command line pipeline: synth -> concepts -> train -> score / export-latent.

Every option can also come from a flat `key = value` config file passed with
--config; values given on the command line win. Errors print one
machine-parsable line to stderr and exit with status 2.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import sys
from pathlib import Path

from . import anomaly, concepts, data, vae
from .data import fmt_float
from .errors import ConfigError, KpivaeError, ValidationError

REQUIRED = object()

HISTORY_HEADER = ["epoch", "train_loss", "train_kl", "train_loglik", "val_loss"]
LATENT_HEADER = ["element_id", "date", "cluster", "dim", "mu", "logvar", "kpi_value"]

SYNTH_KEYS = {
    "out": (REQUIRED, str),
    "labels_out": (None, str),
    "elements": (50, int),
    "days": (150, int),
    "clusters": (10, int),
    "anomaly_rate": (0.01, float),
    "anomaly_magnitude": (10.0, float),
    "seed": (0, int),
}
CONCEPTS_KEYS = {
    "data": (REQUIRED, str),
    "k": (10, int),
    "seed": (0, int),
    "out_model": (REQUIRED, str),
    "out_stats": (REQUIRED, str),
    "out_quality": (None, str),
}
TRAIN_KEYS = {
    "data": (REQUIRED, str),
    "model": (REQUIRED, str),
    "stats": (REQUIRED, str),
    "out_checkpoint": (REQUIRED, str),
    "out_history": (None, str),
    "out_latent_stats": (None, str),
    "window": (25, int),
    "stride": (None, int),
    "hidden": (64, int),
    "layers": (3, int),
    "free_dims": (25, int),
    "prior_std": (1.0, float),
    "learning_rate": (1e-3, float),
    "recon_weight": (10.0, float),
    "batch_size": (64, int),
    "max_epochs": (200, int),
    "patience": (10, int),
    "eval_samples": (10, int),
    "seed": (0, int),
    "val_fraction": (0.05, float),
}
SCORE_KEYS = {
    "data": (REQUIRED, str),
    "checkpoint": (REQUIRED, str),
    "model": (REQUIRED, str),
    "stats": (REQUIRED, str),
    "latent_stats": (REQUIRED, str),
    "out": (REQUIRED, str),
    "window": (25, int),
    "stride": (None, int),
    "eval_samples": (10, int),
    "seed": (0, int),
    "loss_floor": (None, float),
    "top_k": (None, int),
    "z_threshold": (15.0, float),
    "symmetric": (False, bool),
}
EXPORT_KEYS = {
    "data": (REQUIRED, str),
    "checkpoint": (REQUIRED, str),
    "model": (REQUIRED, str),
    "stats": (REQUIRED, str),
    "out": (REQUIRED, str),
    "window": (25, int),
    "stride": (None, int),
    "cluster": (None, int),
    "dims": ("concept", str),
    "svg": (None, str),
}
ALL_KEYS = set().union(SYNTH_KEYS, CONCEPTS_KEYS, TRAIN_KEYS, SCORE_KEYS, EXPORT_KEYS)


def _parse_bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"bad boolean value {s!r}")


def load_config(path) -> dict[str, str]:
    """Flat key = value lines; '#' starts a comment; keys use snake_case."""
    cfg: dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        for line_no, ln in enumerate(fh, start=1):
            s = ln.split("#", 1)[0].strip()
            if not s:
                continue
            if "=" not in s:
                raise ConfigError(f"config line {line_no}: expected key = value, got {s!r}")
            k, v = s.split("=", 1)
            k = k.strip().replace("-", "_")
            if k not in ALL_KEYS:
                raise ConfigError(f"config line {line_no}: unknown key {k!r}")
            cfg[k] = v.strip()
    return cfg


class Opts:
    """Effective option values: CLI flag, else config entry, else default."""

    def __init__(self, args: argparse.Namespace, table: dict):
        self.args = vars(args)
        self.table = table
        self.config = load_config(args.config) if args.config else {}

    def get(self, key: str):
        default, cast = self.table[key]
        v = self.args.get(key)
        if v is None and key in self.config:
            raw = self.config[key]
            v = _parse_bool(raw) if cast is bool else cast(raw)
        if v is None:
            if default is REQUIRED:
                raise ConfigError(f"missing required option --{key.replace('_', '-')}")
            v = default
        return v


def split_elements(element_ids, val_fraction: float) -> tuple[set[str], set[str]]:
    """Deterministic train/val element split keyed on an id hash.

    Uses md5(element_id) mod 1000 against the fraction, with a rank-based
    fallback so neither side ends up empty on small datasets.
    """
    ids = sorted(set(element_ids))
    if not 0.0 < val_fraction < 1.0:
        raise ConfigError("val_fraction must be in (0, 1)")
    if len(ids) < 2:
        raise ValidationError("need at least 2 elements to split train/val")

    def bucket(e: str) -> int:
        return int(hashlib.md5(e.encode("utf-8")).hexdigest(), 16) % 1000

    cut = round(val_fraction * 1000)
    val = {e for e in ids if bucket(e) < cut}
    if not val or len(val) == len(ids):
        by_hash = sorted(ids, key=lambda e: hashlib.md5(e.encode("utf-8")).hexdigest())
        n_val = min(max(1, round(val_fraction * len(ids))), len(ids) - 1)
        val = set(by_hash[:n_val])
    return set(ids) - val, val


def cmd_synth(args: argparse.Namespace) -> int:
    o = Opts(args, SYNTH_KEYS)
    out = Path(o.get("out"))
    labels_out = o.get("labels_out") or out.with_suffix(".labels.csv")
    cfg = data.SynthConfig(
        element_count=o.get("elements"),
        days=o.get("days"),
        cluster_profiles=data.default_profiles(o.get("clusters")),
        anomaly_rate=o.get("anomaly_rate"),
        anomaly_magnitude=o.get("anomaly_magnitude"),
        rng_seed=o.get("seed"),
    )
    records, labels = data.synth_generate(cfg)
    data.save_records(records, out)
    data.save_labels(labels, labels_out)
    print(f"wrote {len(records)} records ({len(labels)} injected) to {out}")
    return 0


def cmd_concepts(args: argparse.Namespace) -> int:
    o = Opts(args, CONCEPTS_KEYS)
    records = data.load_records(o.get("data"))
    stats = data.fit_normalization(records)
    data.save_norm_stats(stats, o.get("out_stats"))
    profiles = concepts.element_profiles(records, stats)
    model = concepts.kmeans_fit(profiles, o.get("k"), seed=o.get("seed"))
    concepts.scale_centroids(model)
    concepts.save_concept_model(model, o.get("out_model"))
    quality_path = o.get("out_quality")
    if quality_path:
        report = concepts.cluster_quality(model, profiles)
        with open(quality_path, "w", newline="", encoding="utf-8") as fh:
            csv.writer(fh, lineterminator="\n").writerows(concepts.quality_csv_rows(report))
    print(f"fitted k={model.k} on {len(profiles)} elements, inertia {fmt_float(model.inertia)}")
    return 0


def _load_windows(o: Opts) -> list[data.SequenceWindow]:
    records = data.load_records(o.get("data"))
    stats = data.load_norm_stats(o.get("stats"))
    window = o.get("window")
    stride = o.get("stride") or window
    return data.window_sequences(records, window, stride=stride, stats=stats)


def cmd_train(args: argparse.Namespace) -> int:
    o = Opts(args, TRAIN_KEYS)
    windows = _load_windows(o)
    if not windows:
        raise ValidationError("no training windows; check --window against run lengths")
    model = concepts.load_concept_model(o.get("model"))
    train_ids, val_ids = split_elements(
        (w.element_id for w in windows), o.get("val_fraction")
    )
    train_w = [w for w in windows if w.element_id in train_ids]
    val_w = [w for w in windows if w.element_id in val_ids]

    arch = vae.ArchConfig(input_dim=data.N_KPIS, hidden=o.get("hidden"), layers=o.get("layers"))
    latent = vae.LatentConfig(
        concept_dims=data.N_KPIS, free_dims=o.get("free_dims"), prior_std=o.get("prior_std")
    )
    tcfg = vae.TrainConfig(
        learning_rate=o.get("learning_rate"),
        recon_weight=o.get("recon_weight"),
        batch_size=o.get("batch_size"),
        max_epochs=o.get("max_epochs"),
        patience=o.get("patience"),
        eval_samples=o.get("eval_samples"),
        seed=o.get("seed"),
    )
    params, history = vae.train(train_w, val_w, model, tcfg, arch=arch, latent=latent)
    vae.save_checkpoint(params, o.get("out_checkpoint"))

    history_path = o.get("out_history")
    if history_path:
        with open(history_path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(HISTORY_HEADER)
            for row in history:
                writer.writerow(
                    [row["epoch"]] + [fmt_float(row[k]) for k in HISTORY_HEADER[1:]]
                )
    stats_path = o.get("out_latent_stats")
    if stats_path:
        lstats = anomaly.fit_latent_stats(params, train_w, model.assignment)
        anomaly.save_latent_stats(lstats, stats_path)

    best = min(h["val_loss"] for h in history)
    print(
        f"trained {len(history)} epochs on {len(train_w)} windows "
        f"({len(val_w)} val), best val loss {fmt_float(best)}"
    )
    return 0


def cmd_score(args: argparse.Namespace) -> int:
    o = Opts(args, SCORE_KEYS)
    windows = _load_windows(o)
    params = vae.load_checkpoint(o.get("checkpoint"))
    model = concepts.load_concept_model(o.get("model"))
    lstats = anomaly.load_latent_stats(o.get("latent_stats"))
    reports = anomaly.detect(
        params,
        windows,
        model,
        lstats,
        eval_samples=o.get("eval_samples"),
        seed=o.get("seed"),
        loss_floor=o.get("loss_floor"),
        top_k=o.get("top_k"),
        z_threshold=o.get("z_threshold"),
        symmetric=o.get("symmetric"),
    )
    anomaly.save_report(reports, o.get("out"))
    print(f"reported {len(reports)} timesteps to {o.get('out')}")
    return 0


def _svg_scatter(points: list[tuple[int, float, float]], concept_dims: int, path) -> None:
    """Tiny dependency-free scatter: one panel per concept dim, mu vs KPI value."""
    panel, pad = 150, 24
    width = concept_dims * (panel + pad) + pad
    height = panel + 2 * pad
    by_dim: dict[int, list[tuple[float, float]]] = {d: [] for d in range(concept_dims)}
    for dim, kpi_value, mu in points:
        if dim < concept_dims:
            by_dim[dim].append((kpi_value, mu))
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'font-family="monospace" font-size="10">'
    ]
    for dim in range(concept_dims):
        x0 = pad + dim * (panel + pad)
        y0 = pad
        parts.append(
            f'<rect x="{x0}" y="{y0}" width="{panel}" height="{panel}" '
            f'fill="none" stroke="black"/>'
        )
        parts.append(
            f'<text x="{x0}" y="{y0 - 6}">{data.KPI_NAMES[dim]}</text>'
        )
        pts = by_dim[dim]
        if pts:
            mus = [m for _, m in pts]
            lo, hi = min(mus), max(mus)
            span = (hi - lo) or 1.0
            for v, m in pts:
                px = x0 + v * panel
                py = y0 + panel - (m - lo) / span * panel
                parts.append(f'<circle cx="{px:.2f}" cy="{py:.2f}" r="1.5"/>')
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts) + "\n", encoding="utf-8")


def cmd_export_latent(args: argparse.Namespace) -> int:
    o = Opts(args, EXPORT_KEYS)
    windows = _load_windows(o)
    params = vae.load_checkpoint(o.get("checkpoint"))
    model = concepts.load_concept_model(o.get("model"))
    dims_mode = o.get("dims")
    if dims_mode not in ("concept", "all"):
        raise ConfigError("--dims must be 'concept' or 'all'")
    n_dims = params.latent.concept_dims if dims_mode == "concept" else params.latent.total
    cluster_filter = o.get("cluster")
    if cluster_filter is not None and not 0 <= cluster_filter < model.k:
        raise ConfigError(f"unknown cluster id {cluster_filter} (model has k={model.k})")

    clusters = anomaly.resolve_clusters(windows, model)
    encoded = vae.encode_windows(params, windows)
    seen: set[tuple[str, int]] = set()
    rows: list[list] = []
    points: list[tuple[int, float, float]] = []
    for w, (mu, lv) in zip(windows, encoded):
        cl = clusters[w.element_id]
        if cluster_filter is not None and cl != cluster_filter:
            continue
        for t, d in enumerate(w.dates()):
            key = (w.element_id, int(d))
            if key in seen:
                continue
            seen.add(key)
            for dim in range(n_dims):
                kpi_value = fmt_float(w.values[t, dim]) if dim < data.N_KPIS else ""
                rows.append(
                    [
                        w.element_id,
                        int(d),
                        cl,
                        dim,
                        fmt_float(mu[t, dim]),
                        fmt_float(lv[t, dim]),
                        kpi_value,
                    ]
                )
                if dim < data.N_KPIS:
                    points.append((dim, float(w.values[t, dim]), float(mu[t, dim])))
    with open(o.get("out"), "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(LATENT_HEADER)
        writer.writerows(rows)
    svg_path = o.get("svg")
    if svg_path:
        _svg_scatter(points, params.latent.concept_dims, svg_path)
    print(f"exported {len(rows)} latent rows to {o.get('out')}")
    return 0


def _add(parser: argparse.ArgumentParser, table: dict) -> None:
    parser.add_argument("--config", help="flat key = value defaults file")
    for key, (default, cast) in table.items():
        flag = "--" + key.replace("_", "-")
        if cast is bool:
            parser.add_argument(flag, action="store_const", const=True, default=None)
        else:
            shown = "required" if default is REQUIRED else f"default: {default}"
            parser.add_argument(flag, type=cast, default=None, help=f"({shown})")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="kpivae",
        description="Concept-conditioned VAE pipeline for interpretable KPI anomaly detection",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic KPI dataset with labels")
    _add(p, SYNTH_KEYS)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("concepts", help="fit normalization stats and the cluster model")
    _add(p, CONCEPTS_KEYS)
    p.set_defaults(func=cmd_concepts)

    p = sub.add_parser("train", help="train the model and write a checkpoint")
    _add(p, TRAIN_KEYS)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("score", help="rank timesteps by loss and attribute KPIs")
    _add(p, SCORE_KEYS)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("export-latent", help="dump per-timestep latent means to CSV")
    _add(p, EXPORT_KEYS)
    p.set_defaults(func=cmd_export_latent)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except KpivaeError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
