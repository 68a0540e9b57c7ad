"""Command-line entry points: simulate, train, embed, cluster, evaluate,
ablate, and sweep.

Every command writes a flat key=value manifest describing its inputs and
resolved configuration; the manifest hash is stamped into each delimited
artifact so outputs can be traced back to the run that produced them.
"""

from __future__ import annotations

import csv
import hashlib
import logging
import math
from dataclasses import replace
from datetime import datetime, timezone
from pathlib import Path

import click
import numpy as np

from . import __version__, plots
from .data_io import (
    Corruption,
    MODALITY_NAMES,
    SpotDataset,
    SyntheticSpec,
    corrupted_rows,
    generate_synthetic,
    load_dataset_dir,
    pca_reduce,
    save_dataset,
)
from .errors import SpotfuseError
from .evaluation import METRIC_ORDER, evaluate
from .graph import save_edge_list
from .neural import load_checkpoint, save_checkpoint
from .trainer import (
    TrainConfig,
    config_from_mapping,
    embed as run_embed,
    parse_config_file,
    train as run_train,
    write_loss_log,
)

logger = logging.getLogger(__name__)

HASH_EXCLUDED = ("created", "manifest_hash")


# --------------------------------------------------------------------------
# manifest and artifact helpers


def manifest_hash(entries: dict[str, str]) -> str:
    lines = sorted(f"{k}={v}" for k, v in entries.items() if k not in HASH_EXCLUDED)
    return hashlib.sha256("\n".join(lines).encode()).hexdigest()[:16]


def write_manifest(out_dir: Path, command: str, entries: dict[str, str]) -> str:
    entries = {"command": command, "version": __version__, **entries}
    digest = manifest_hash(entries)
    entries["manifest_hash"] = digest
    entries["created"] = datetime.now(timezone.utc).isoformat()
    path = out_dir / "manifest.txt"
    path.write_text("".join(f"{k}={entries[k]}\n" for k in sorted(entries)))
    return digest


def read_manifest(path: Path) -> dict[str, str]:
    entries = {}
    for line in path.read_text().splitlines():
        if line.strip():
            key, value = line.split("=", 1)
            entries[key] = value
    return entries


def _write_table(path: Path, header: list[str], rows, digest: str | None):
    with open(path, "w", newline="") as fh:
        if digest:
            fh.write(f"# manifest={digest}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def _fmt(value) -> str:
    return repr(float(value)) if isinstance(value, (float, np.floating)) else str(value)


def write_embeddings(path: Path, spot_ids, z: np.ndarray, digest: str | None = None):
    header = ["spot_id"] + [f"dim_{j}" for j in range(z.shape[1])]
    _write_table(path, header,
                 ([sid] + [repr(float(v)) for v in row] for sid, row in zip(spot_ids, z)),
                 digest)


def read_embeddings(path: Path) -> tuple[list[str], np.ndarray]:
    ids, rows = [], []
    with open(path, newline="") as fh:
        reader = csv.reader(line for line in fh if not line.startswith("#"))
        header = next(reader)
        if not header or header[0] != "spot_id":
            raise SpotfuseError(f"{path}: expected an embedding table starting with spot_id")
        for row in reader:
            ids.append(row[0])
            rows.append([float(v) for v in row[1:]])
    return ids, np.array(rows, dtype=np.float64)


def write_gate_weights(path: Path, spot_ids, names, weights: np.ndarray,
                       fallback: np.ndarray, digest: str | None = None):
    header = ["spot_id"] + [f"w_{name}" for name in names] + ["fallback"]
    body = (
        [sid] + [repr(float(v)) for v in w_row] + [str(int(fb))]
        for sid, w_row, fb in zip(spot_ids, weights, fallback)
    )
    _write_table(path, header, body, digest)


# --------------------------------------------------------------------------
# option plumbing


def _parse_int_list(_ctx, _param, value):
    if value is None:
        return None
    try:
        return [int(v) for v in str(value).split(",") if v.strip()]
    except ValueError as exc:
        raise click.BadParameter(str(exc))


def _parse_float_list(_ctx, _param, value):
    if value is None:
        return None
    try:
        return [float(v) for v in str(value).split(",") if v.strip()]
    except ValueError as exc:
        raise click.BadParameter(str(exc))


CONFIG_KEYS = (
    "epochs", "lr", "lam", "gamma", "tau", "delta", "k_spatial", "k_feature",
    "d_latent", "d_att", "spline_grid", "n_layers", "seed", "threads",
)
CONFIG_FLAGS = ("no_moe", "no_contrast", "no_kan", "share_spatial", "share_attention")


def config_options(fn):
    """Attach every TrainConfig field as an optional override."""
    for key in reversed(CONFIG_KEYS):
        flag = "--" + key.replace("_", "-")
        fn = click.option(flag, key, default=None, type=str, help=f"override {key}")(fn)
    for key in reversed(CONFIG_FLAGS):
        flag = "--" + key.replace("_", "-")
        fn = click.option(flag, key, is_flag=True, default=None, help=f"enable {key}")(fn)
    fn = click.option("--config", "config_file", type=click.Path(exists=True, dir_okay=False),
                      default=None, help="flat key=value config file")(fn)
    return fn


def resolve_config(config_file, overrides: dict) -> TrainConfig:
    """defaults < config file < explicit command-line flags."""
    mapping = {}
    if config_file:
        mapping.update(parse_config_file(config_file))
    mapping.update({k: v for k, v in overrides.items() if v is not None})
    return config_from_mapping(mapping)


def pop_config_overrides(kwargs: dict) -> dict:
    return {key: kwargs.pop(key) for key in CONFIG_KEYS + CONFIG_FLAGS}


def _load_data(data_dir: str, pca_dim: int | None) -> SpotDataset:
    dataset = load_dataset_dir(data_dir)
    if pca_dim is not None:
        reduced = {name: pca_reduce(mat, pca_dim) for name, mat in dataset.modalities.items()}
        dataset = SpotDataset(dataset.spot_ids, dataset.coords, reduced, dataset.labels)
    return dataset


def _require_labels(dataset: SpotDataset, data_dir):
    if dataset.labels is None:
        raise SpotfuseError(f"{data_dir}: labels.csv is required for this command")


def friendly_errors(fn):
    import functools

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except (SpotfuseError, ValueError) as exc:
            raise click.ClickException(str(exc))

    return wrapper


# --------------------------------------------------------------------------
# commands


@click.group()
@click.version_option(__version__)
@click.option("--verbose", is_flag=True, help="log progress to stderr")
def main(verbose):
    """Adaptive fusion of spatial multi-omics data."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")


@main.command()
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@click.option("--spots", default=600, show_default=True)
@click.option("--domains", default=4, show_default=True)
@click.option("--grid-side", default=None, type=int,
              help="lattice side length [default: ceil(sqrt(spots))]")
@click.option("--dims", default="30,30,30", show_default=True, callback=_parse_int_list,
              help="feature widths for rna,adt,img")
@click.option("--noise-sigma", default=1.0, show_default=True)
@click.option("--corrupt", multiple=True, metavar="MOD:FRAC:SIGMA",
              help="overwrite a fraction of one modality with noise (repeatable)")
@click.option("--sparse", multiple=True, type=click.Choice(MODALITY_NAMES),
              help="write this modality as Matrix Market instead of CSV")
@click.option("--seed", default=0, show_default=True)
@friendly_errors
def simulate(out_dir, spots, domains, grid_side, dims, noise_sigma, corrupt, sparse, seed):
    """Generate a synthetic lattice dataset."""
    if len(dims) != 3:
        raise click.BadParameter("--dims needs exactly three widths")
    corruption = []
    for item in corrupt:
        parts = item.split(":")
        if len(parts) != 3:
            raise click.BadParameter(f"--corrupt {item!r}: expected MOD:FRAC:SIGMA")
        corruption.append(Corruption(parts[0], float(parts[1]), float(parts[2])))
    side = grid_side if grid_side is not None else math.ceil(math.sqrt(spots))
    spec = SyntheticSpec(
        n_spots=spots, n_domains=domains, grid_side=side, dims=tuple(dims),
        noise_sigma=noise_sigma, corruption=tuple(corruption),
    )
    dataset = generate_synthetic(spec, seed)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    digest = write_manifest(out, "simulate", {
        "spots": str(spots), "domains": str(domains), "grid_side": str(side),
        "dims": ",".join(map(str, dims)), "noise_sigma": repr(float(noise_sigma)),
        "corrupt": ";".join(corrupt) or "none", "seed": str(seed),
    })
    save_dataset(dataset, out, manifest_hash=digest, sparse=tuple(sparse))
    plots.spatial_map(dataset.coords, dataset.labels, out / "domains.png", title="true domains")
    click.echo(f"wrote dataset ({spots} spots, {domains} domains) to {out}")


@main.command()
@click.option("--data", "data_dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@click.option("--pca-dim", default=None, type=int,
              help="reduce every modality to this width first")
@click.option("--dump-graphs", is_flag=True, help="also write edge lists")
@config_options
@friendly_errors
def train(data_dir, out_dir, pca_dim, dump_graphs, config_file, **kwargs):
    """Train the fusion model on a dataset directory."""
    cfg = resolve_config(config_file, pop_config_overrides(kwargs))
    dataset = _load_data(data_dir, pca_dim)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = {"input.data": str(Path(data_dir).resolve()),
               "pca_dim": str(pca_dim) if pca_dim else "none", **cfg.to_mapping()}
    digest = write_manifest(out, "train", entries)

    result = run_train(dataset, cfg)
    write_loss_log(result.log, out / "loss_log.csv", manifest_hash=digest)
    plots.loss_curves(result.log, out / "loss_curve.png")
    save_checkpoint(out / "checkpoint.ckpt", result.model, {
        "config": cfg.to_mapping(),
        "pca_dim": pca_dim or 0,
        "manifest": digest,
    })
    if dump_graphs:
        save_edge_list(result.graphs.spatial, out / "spatial.edges.csv", digest)
        for name, adj in result.graphs.feature.items():
            save_edge_list(adj, out / f"{name}.edges.csv", digest)
    final = result.log[-1]["total"] if result.log else float("nan")
    click.echo(f"trained {cfg.epochs} epochs (final loss {final:.6f}); outputs in {out}")


@main.command()
@click.option("--checkpoint", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--data", "data_dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@click.option("--dump-views", is_flag=True, help="also write per-modality embeddings")
@friendly_errors
def embed(checkpoint, data_dir, out_dir, dump_views):
    """Extract fused embeddings and gate weights from a checkpoint."""
    model, meta = load_checkpoint(checkpoint)
    cfg = config_from_mapping(meta["config"])
    pca_dim = meta.get("pca_dim") or None
    dataset = _load_data(data_dir, pca_dim)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    digest = write_manifest(out, "embed", {
        "input.data": str(Path(data_dir).resolve()),
        "input.checkpoint": str(Path(checkpoint).resolve()),
        "checkpoint.manifest": str(meta.get("manifest", "")),
        **cfg.to_mapping(),
    })
    result = run_embed(model, dataset, cfg)
    write_embeddings(out / "embeddings.csv", dataset.spot_ids, result.z, digest)
    names = dataset.modality_names
    if result.decision is not None:
        weights = result.decision.weights.numpy()
        fallback = result.decision.fallback.numpy()
        write_gate_weights(out / "gate_weights.csv", dataset.spot_ids, names,
                           weights, fallback, digest)
        plots.gate_weight_map(dataset.coords, weights, names, out / "gate_weights.png")
    else:
        click.echo("gate disabled (no_moe): skipping gate weight dump")
    if dump_views:
        for name in names:
            emb = result.embeddings[name]
            for view in ("spatial", "feature", "fused"):
                write_embeddings(out / f"{name}_{view}.csv", dataset.spot_ids,
                                 getattr(emb, view).numpy(), digest)
    click.echo(f"embedded {dataset.n_spots} spots into {out}")


@main.command()
@click.option("--embeddings", "emb_path", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@click.option("--counts", default="6,7,8,9,10", show_default=True, callback=_parse_int_list)
@click.option("--seed", default=0, show_default=True)
@click.option("--data", "data_dir", default=None, type=click.Path(exists=True, file_okay=False),
              help="dataset directory (enables spatial cluster maps)")
@friendly_errors
def cluster(emb_path, out_dir, counts, seed, data_dir):
    """Cluster an embedding table at one or more cluster counts."""
    from .evaluation import internal_metrics, kmeans, count_seed

    ids, z = read_embeddings(Path(emb_path))
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    digest = write_manifest(out, "cluster", {
        "input.embeddings": str(Path(emb_path).resolve()),
        "counts": ",".join(map(str, counts)), "seed": str(seed),
    })
    all_assign = {}
    metric_rows = []
    for k in counts:
        assign = kmeans(z, k, seed=count_seed(seed, k))
        all_assign[k] = assign
        row = internal_metrics(z, assign)
        metric_rows.append([str(k)] + [_fmt(row[m]) for m in ("sc", "chi", "dbi")]
                           + [_fmt(100.0 * row["dbi"])])
    header = ["spot_id"] + [f"k{k}" for k in counts]
    _write_table(out / "assignments.csv", header,
                 ([sid] + [str(all_assign[k][i]) for k in counts]
                  for i, sid in enumerate(ids)),
                 digest)
    _write_table(out / "internal_metrics.csv",
                 ["count", "sc", "chi", "dbi", "dbi_x100"], metric_rows, digest)
    if data_dir:
        coords = load_dataset_dir(data_dir).coords
        for k in counts:
            plots.spatial_map(coords, all_assign[k], out / f"cluster_map_k{k}.png",
                              title=f"k = {k}")
    click.echo(f"clustered {len(ids)} spots at counts {counts}; outputs in {out}")


@main.command(name="evaluate")
@click.option("--embeddings", "emb_path", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--data", "data_dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@click.option("--counts", default="6,7,8,9,10", show_default=True, callback=_parse_int_list)
@click.option("--seed", default=0, show_default=True)
@friendly_errors
def evaluate_cmd(emb_path, data_dir, out_dir, counts, seed):
    """Score an embedding against ground-truth labels (all nine metrics)."""
    ids, z = read_embeddings(Path(emb_path))
    dataset = load_dataset_dir(data_dir)
    _require_labels(dataset, data_dir)
    if list(dataset.spot_ids) != ids:
        raise SpotfuseError("embedding rows do not match the dataset's spot ids")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    digest = write_manifest(out, "evaluate", {
        "input.embeddings": str(Path(emb_path).resolve()),
        "input.data": str(Path(data_dir).resolve()),
        "counts": ",".join(map(str, counts)), "seed": str(seed),
    })
    report = evaluate(z, dataset.labels, counts=counts, seed=seed)
    header, body = report.to_csv_rows()
    _write_table(out / "metrics.csv", header, body, digest)
    (out / "report.txt").write_text(report.format_text())
    plots.metric_curves(report, out / "metrics.png")
    click.echo(report.format_text())
    click.echo(f"outputs in {out}")


ABLATION_VARIANTS = {
    "full": {},
    "no_moe": {"no_moe": True},
    "no_contrast": {"no_contrast": True},
    "no_kan": {"no_kan": True},
}


def _train_and_score(dataset, cfg: TrainConfig, counts, eval_seed):
    result = run_train(dataset, cfg)
    out = run_embed(result.model, dataset, cfg, result.graphs)
    report = evaluate(out.z, dataset.labels, counts=counts, seed=eval_seed)
    return report, out


@main.command()
@click.option("--data", "data_dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@click.option("--seeds", default="0,1,2,3,4", show_default=True, callback=_parse_int_list)
@click.option("--counts", default="6,7,8,9,10", show_default=True, callback=_parse_int_list)
@click.option("--pca-dim", default=None, type=int)
@config_options
@friendly_errors
def ablate(data_dir, out_dir, seeds, counts, pca_dim, config_file, **kwargs):
    """Train every ablation variant over a list of seeds and compare."""
    cfg = resolve_config(config_file, pop_config_overrides(kwargs))
    dataset = _load_data(data_dir, pca_dim)
    _require_labels(dataset, data_dir)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    digest = write_manifest(out, "ablate", {
        "input.data": str(Path(data_dir).resolve()),
        "seeds": ",".join(map(str, seeds)), "counts": ",".join(map(str, counts)),
        "pca_dim": str(pca_dim) if pca_dim else "none", **cfg.to_mapping(),
    })
    rows = []
    summary = {}
    for variant, flags in ABLATION_VARIANTS.items():
        per_run = {m: [] for m in METRIC_ORDER}
        for seed in seeds:
            run_cfg = replace(cfg, seed=seed, **flags)
            report, _ = _train_and_score(dataset, run_cfg, counts, eval_seed=seed)
            for row in report.rows:
                rows.append([variant, str(seed), str(row["count"])]
                            + [_fmt(row[m]) for m in METRIC_ORDER])
                for m in METRIC_ORDER:
                    per_run[m].append(row[m])
            click.echo(f"{variant} seed={seed}: mean ARI {report.mean['ari']:.4f}")
        summary[variant] = {}
        for m in METRIC_ORDER:
            summary[variant][f"{m}_mean"] = float(np.mean(per_run[m]))
            summary[variant][f"{m}_std"] = float(np.std(per_run[m]))
    _write_table(out / "ablation.csv",
                 ["variant", "seed", "count"] + list(METRIC_ORDER), rows, digest)
    summary_header = ["variant"]
    for m in METRIC_ORDER:
        summary_header += [f"{m}_mean", f"{m}_std"]
    _write_table(out / "ablation_summary.csv", summary_header,
                 ([v] + [_fmt(summary[v][c]) for c in summary_header[1:]]
                  for v in summary),
                 digest)
    plots.ablation_bars(summary, "ari", out / "ablation.png")
    lines = ["variant          mean ARI   std"]
    for v in summary:
        lines.append(f"{v:<16} {summary[v]['ari_mean']:.4f}   {summary[v]['ari_std']:.4f}")
    text = "\n".join(lines) + "\n"
    (out / "ablation.txt").write_text(text)
    click.echo(text)


SWEEPABLE = ("gamma", "lam", "lambda", "tau", "delta", "lr")


@main.command()
@click.option("--data", "data_dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@click.option("--param", required=True, type=click.Choice(SWEEPABLE))
@click.option("--values", required=True, callback=_parse_float_list)
@click.option("--seeds", default="0", show_default=True, callback=_parse_int_list)
@click.option("--counts", default="6,7,8,9,10", show_default=True, callback=_parse_int_list)
@click.option("--pca-dim", default=None, type=int)
@config_options
@friendly_errors
def sweep(data_dir, out_dir, param, values, seeds, counts, pca_dim, config_file, **kwargs):
    """Re-train across a grid of one hyperparameter and report sensitivity."""
    cfg = resolve_config(config_file, pop_config_overrides(kwargs))
    dataset = _load_data(data_dir, pca_dim)
    _require_labels(dataset, data_dir)
    field = {"lambda": "lam"}.get(param, param)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    digest = write_manifest(out, "sweep", {
        "input.data": str(Path(data_dir).resolve()),
        "param": field, "values": ",".join(map(repr, values)),
        "seeds": ",".join(map(str, seeds)), "counts": ",".join(map(str, counts)),
        "pca_dim": str(pca_dim) if pca_dim else "none", **cfg.to_mapping(),
    })
    sweep_rows = []
    for value in values:
        collected = {m: [] for m in METRIC_ORDER}
        for seed in seeds:
            run_cfg = replace(cfg, seed=seed, **{field: value})
            run_cfg.validate()
            report, _ = _train_and_score(dataset, run_cfg, counts, eval_seed=seed)
            for row in report.rows:
                for m in METRIC_ORDER:
                    collected[m].append(row[m])
        means = {m: float(np.mean(collected[m])) for m in METRIC_ORDER}
        sweep_rows.append({"value": value, **means})
        click.echo(f"{field}={value:g}: ari={means['ari']:.4f} "
                   f"nmi={means['nmi']:.4f} fmi={means['fmi']:.4f}")
    _write_table(out / "sweep.csv", [field] + list(METRIC_ORDER),
                 ([_fmt(r["value"])] + [_fmt(r[m]) for m in METRIC_ORDER]
                  for r in sweep_rows),
                 digest)
    plots.sweep_curves(values, sweep_rows, field, out / "sweep.png")
    click.echo(f"outputs in {out}")


if __name__ == "__main__":
    main()
