"""Loading, saving, and synthesis of spot-level multimodal datasets.

All tables are plain delimited text. Readers skip blank lines and lines
starting with '#', so artifact files may carry a leading manifest comment
without breaking the documented headers.
"""

from __future__ import annotations

import csv
import logging
import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.io import mmread, mmwrite
from scipy.sparse import coo_matrix

from .errors import AlignmentMismatchError, DataValidationError

logger = logging.getLogger(__name__)

MODALITY_NAMES = ("rna", "adt", "img")
_NAME_RE = re.compile(r"^[A-Za-z0-9_\-]+$")


@dataclass(frozen=True)
class SpotDataset:
    """Aligned multimodal measurements over a common set of spots.

    Row order is shared by coords, every modality, and labels. Arrays are
    marked read-only so instances can be shared between runs.
    """

    spot_ids: tuple[str, ...]
    coords: np.ndarray
    modalities: dict[str, np.ndarray]
    labels: np.ndarray | None = None

    def __post_init__(self):
        n = len(self.spot_ids)
        if len(set(self.spot_ids)) != n:
            raise AlignmentMismatchError("duplicate spot ids in dataset")
        coords = np.ascontiguousarray(self.coords, dtype=np.float64)
        if coords.shape != (n, 2):
            raise ValueError(f"coords must have shape ({n}, 2), got {coords.shape}")
        _require_finite(coords, "coords")
        coords.setflags(write=False)
        object.__setattr__(self, "coords", coords)
        mods = {}
        for name, mat in self.modalities.items():
            if not _NAME_RE.match(name):
                raise ValueError(f"invalid modality name {name!r}")
            mat = np.ascontiguousarray(mat, dtype=np.float64)
            if mat.ndim != 2 or mat.shape[0] != n:
                raise ValueError(f"modality {name!r} must have {n} rows, got shape {mat.shape}")
            _require_finite(mat, f"modality {name!r}")
            mat.setflags(write=False)
            mods[name] = mat
        object.__setattr__(self, "modalities", mods)
        if self.labels is not None:
            labels = np.asarray(self.labels)
            if labels.shape != (n,):
                raise ValueError(f"labels must have shape ({n},), got {labels.shape}")
            labels.setflags(write=False)
            object.__setattr__(self, "labels", labels)

    @property
    def n_spots(self) -> int:
        return len(self.spot_ids)

    @property
    def modality_names(self) -> tuple[str, ...]:
        return tuple(self.modalities)


@dataclass(frozen=True)
class Corruption:
    """Replace a fraction of one modality's rows with pure noise."""

    modality: str
    fraction: float
    sigma: float

    def __post_init__(self):
        if self.modality not in MODALITY_NAMES:
            raise ValueError(f"unknown modality {self.modality!r}, expected one of {MODALITY_NAMES}")
        if not 0.0 <= self.fraction <= 1.0:
            raise ValueError(f"corruption fraction must be in [0, 1], got {self.fraction}")
        if self.sigma < 0:
            raise ValueError(f"corruption sigma must be >= 0, got {self.sigma}")


@dataclass(frozen=True)
class SyntheticSpec:
    """Parameters for the lattice generator."""

    n_spots: int
    n_domains: int
    grid_side: int
    dims: tuple[int, int, int]
    noise_sigma: float = 1.0
    corruption: tuple[Corruption, ...] = ()

    def __post_init__(self):
        if self.n_spots < 1:
            raise ValueError("n_spots must be >= 1")
        if self.n_domains < 1:
            raise ValueError("n_domains must be >= 1")
        if self.grid_side < 1:
            raise ValueError("grid_side must be >= 1")
        if self.n_spots > self.grid_side**2:
            raise ValueError(
                f"n_spots={self.n_spots} does not fit a {self.grid_side}x{self.grid_side} lattice"
            )
        if len(self.dims) != len(MODALITY_NAMES) or any(d < 1 for d in self.dims):
            raise ValueError(f"dims must be {len(MODALITY_NAMES)} positive ints, got {self.dims}")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        seen = set()
        for corr in self.corruption:
            if corr.modality in seen:
                raise ValueError(f"duplicate corruption entry for {corr.modality!r}")
            seen.add(corr.modality)


def generate_synthetic(spec: SyntheticSpec, seed: int) -> SpotDataset:
    """Simulate a lattice of spots with domain-structured modalities.

    Spots occupy the first n_spots positions of a grid_side x grid_side
    lattice (x = i % side, y = i // side). Domains are contiguous angular
    sectors around the lattice center. Each modality draws per-domain
    Gaussian means, rescaled so the minimum pairwise separation is at
    least 4 * noise_sigma, then adds iid N(0, noise_sigma^2) noise.
    Corrupted rows are overwritten with iid N(0, sigma^2) draws that carry
    no domain signal.
    """
    rng = np.random.default_rng(seed)
    n = spec.n_spots
    idx = np.arange(n)
    coords = np.stack([idx % spec.grid_side, idx // spec.grid_side], axis=1).astype(np.float64)

    center = coords.mean(axis=0)
    theta = np.arctan2(coords[:, 1] - center[1], coords[:, 0] - center[0])
    sector = np.floor((theta + np.pi) / (2.0 * np.pi) * spec.n_domains).astype(np.int64)
    labels = np.clip(sector, 0, spec.n_domains - 1)

    modalities = {}
    for name, dim in zip(MODALITY_NAMES, spec.dims):
        means = rng.normal(0.0, 1.0, size=(spec.n_domains, dim))
        if spec.n_domains > 1 and spec.noise_sigma > 0:
            diffs = means[:, None, :] - means[None, :, :]
            dist = np.sqrt((diffs**2).sum(axis=2))
            lo = dist[~np.eye(spec.n_domains, dtype=bool)].min()
            target = 4.0 * spec.noise_sigma
            if 0 < lo < target:
                means = means * (target / lo)
        modalities[name] = means[labels] + rng.normal(0.0, spec.noise_sigma, size=(n, dim))

    for corr in spec.corruption:
        n_bad = int(math.floor(corr.fraction * n))
        bad = rng.choice(n, size=n_bad, replace=False)
        mat = modalities[corr.modality].copy()
        mat[bad] = rng.normal(0.0, corr.sigma, size=(n_bad, mat.shape[1]))
        modalities[corr.modality] = mat
        logger.info("corrupted %d/%d rows of %s (sigma=%g)", n_bad, n, corr.modality, corr.sigma)

    ids = tuple(f"spot_{i:05d}" for i in range(n))
    return SpotDataset(spot_ids=ids, coords=coords, modalities=modalities, labels=labels)


def corrupted_rows(spec: SyntheticSpec, seed: int, modality: str) -> np.ndarray:
    """Rebuild the row indices a corruption entry hit for a given seed.

    Replays the generator's draw sequence so callers can inspect which
    spots were overwritten without storing a side channel in the dataset.
    """
    rng = np.random.default_rng(seed)
    for dim in spec.dims:
        rng.normal(0.0, 1.0, size=(spec.n_domains, dim))
        rng.normal(0.0, spec.noise_sigma, size=(spec.n_spots, dim))
    for corr in spec.corruption:
        n_bad = int(math.floor(corr.fraction * spec.n_spots))
        bad = rng.choice(spec.n_spots, size=n_bad, replace=False)
        if corr.modality == modality:
            return np.sort(bad)
        rng.normal(0.0, corr.sigma, size=(n_bad, spec.dims[MODALITY_NAMES.index(corr.modality)]))
    raise ValueError(f"no corruption entry for modality {modality!r}")


def pca_reduce(features: np.ndarray, k: int) -> np.ndarray:
    """Scores of the top-k principal components of a column-centered matrix.

    Component signs are pinned so each loading vector's largest-magnitude
    entry is positive, keeping outputs deterministic across runs.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"features must be 2-D, got shape {x.shape}")
    if not 1 <= k <= min(x.shape):
        raise ValueError(f"k must be in [1, {min(x.shape)}], got {k}")
    centered = x - x.mean(axis=0, keepdims=True)
    u, s, vt = np.linalg.svd(centered, full_matrices=False)
    for j in range(k):
        pivot = np.argmax(np.abs(vt[j]))
        if vt[j, pivot] < 0:
            vt[j] = -vt[j]
            u[:, j] = -u[:, j]
    return u[:, :k] * s[:k]


def _require_finite(mat: np.ndarray, context: str, spot_ids=None, columns=None):
    bad = ~np.isfinite(mat)
    if bad.any():
        r, c = np.argwhere(bad)[0]
        where = f"row {r}" if spot_ids is None else f"row {r} (spot {spot_ids[r]!r})"
        col = f"column {c}" if columns is None else f"column {c} ({columns[c]!r})"
        raise DataValidationError(f"{context}: non-finite value at {where}, {col}")


def _read_delimited(path: Path) -> tuple[list[str], list[list[str]]]:
    rows = []
    with open(path, newline="") as fh:
        for line in csv.reader(fh):
            if not line or (line[0].startswith("#") and len(line) == 1):
                continue
            rows.append(line)
    if not rows:
        raise DataValidationError(f"{path}: empty file")
    return rows[0], rows[1:]


def _parse_matrix(path: Path, header: list[str], rows: list[list[str]]) -> tuple[list[str], np.ndarray]:
    ids = []
    data = np.empty((len(rows), len(header) - 1), dtype=np.float64)
    for r, row in enumerate(rows):
        if len(row) != len(header):
            raise DataValidationError(f"{path}: row {r} has {len(row)} fields, expected {len(header)}")
        ids.append(row[0])
        try:
            data[r] = [float(v) for v in row[1:]]
        except ValueError as exc:
            raise DataValidationError(f"{path}: row {r} (spot {row[0]!r}): {exc}") from exc
    _require_finite(data, str(path), spot_ids=ids, columns=header[1:])
    return ids, data


def _check_ids(path, file_ids: list[str], ref_ids: tuple[str, ...]) -> np.ndarray:
    """Map file row order onto the reference order, or explain the mismatch."""
    if len(set(file_ids)) != len(file_ids):
        dup = next(i for i in file_ids if file_ids.count(i) > 1)
        raise AlignmentMismatchError(f"{path}: duplicate spot id {dup!r}")
    file_set, ref_set = set(file_ids), set(ref_ids)
    if file_set != ref_set:
        missing = sorted(ref_set - file_set)[:5]
        extra = sorted(file_set - ref_set)[:5]
        raise AlignmentMismatchError(
            f"{path}: spot ids do not match the coordinate file"
            f" (missing {missing}, unexpected {extra})"
        )
    pos = {sid: i for i, sid in enumerate(file_ids)}
    return np.array([pos[sid] for sid in ref_ids], dtype=np.int64)


def _load_sparse_modality(path: Path) -> tuple[list[str], np.ndarray]:
    sidecar = path.with_name(path.stem + ".spots.txt")
    if not sidecar.exists():
        raise DataValidationError(f"{path}: missing spot sidecar {sidecar.name}")
    ids = [line.strip() for line in sidecar.read_text().splitlines() if line.strip()]
    mat = mmread(path)
    mat = mat.toarray() if hasattr(mat, "toarray") else np.asarray(mat)
    if mat.shape[0] != len(ids):
        raise AlignmentMismatchError(
            f"{path}: {mat.shape[0]} matrix rows but {len(ids)} ids in {sidecar.name}"
        )
    mat = mat.astype(np.float64)
    _require_finite(mat, str(path), spot_ids=ids)
    return ids, mat


def load_dataset(
    coords_path: str | Path,
    modality_paths: dict[str, str | Path],
    labels_path: str | Path | None = None,
) -> SpotDataset:
    """Load and align a dataset from delimited files.

    Dense modalities are CSV (header ``spot_id,f1,...``); paths ending in
    ``.mtx`` are Matrix Market with a ``<stem>.spots.txt`` row sidecar.
    Rows are reordered to the coordinate file's order; any spot-id set
    mismatch raises an alignment error naming the offending file.
    """
    coords_path = Path(coords_path)
    header, rows = _read_delimited(coords_path)
    if header != ["spot_id", "x", "y"]:
        raise DataValidationError(f"{coords_path}: expected header spot_id,x,y, got {header}")
    ids, coords = _parse_matrix(coords_path, header, rows)
    if len(set(ids)) != len(ids):
        dup = next(i for i in ids if ids.count(i) > 1)
        raise AlignmentMismatchError(f"{coords_path}: duplicate spot id {dup!r}")
    ref_ids = tuple(ids)

    modalities = {}
    for name, raw_path in modality_paths.items():
        path = Path(raw_path)
        if path.suffix == ".mtx":
            file_ids, mat = _load_sparse_modality(path)
        else:
            mod_header, mod_rows = _read_delimited(path)
            if not mod_header or mod_header[0] != "spot_id" or len(mod_header) < 2:
                raise DataValidationError(f"{path}: expected header spot_id,<features...>, got {mod_header}")
            file_ids, mat = _parse_matrix(path, mod_header, mod_rows)
        order = _check_ids(path, file_ids, ref_ids)
        modalities[name] = mat[order]

    labels = None
    if labels_path is not None:
        labels_path = Path(labels_path)
        lab_header, lab_rows = _read_delimited(labels_path)
        if lab_header != ["spot_id", "label"]:
            raise DataValidationError(f"{labels_path}: expected header spot_id,label, got {lab_header}")
        file_ids = [row[0] for row in lab_rows]
        raw = [row[1] for row in lab_rows]
        order = _check_ids(labels_path, file_ids, ref_ids)
        try:
            labels = np.array([int(v) for v in raw], dtype=np.int64)[order]
        except ValueError:
            labels = np.array(raw)[order]

    logger.info("loaded %d spots, modalities %s", len(ref_ids), list(modalities))
    return SpotDataset(spot_ids=ref_ids, coords=coords, modalities=modalities, labels=labels)


def load_dataset_dir(directory: str | Path) -> SpotDataset:
    """Load a dataset directory: coords.csv, labels.csv (optional), one file
    per modality. A modalities.txt sidecar pins modality order; otherwise
    stems are taken in sorted order."""
    directory = Path(directory)
    coords = directory / "coords.csv"
    if not coords.exists():
        raise DataValidationError(f"{directory}: missing coords.csv")
    order_file = directory / "modalities.txt"
    if order_file.exists():
        names = [line.strip() for line in order_file.read_text().splitlines() if line.strip()]
    else:
        skip = {"coords", "labels"}
        stems = {p.stem for p in directory.glob("*.csv")} | {p.stem for p in directory.glob("*.mtx")}
        names = sorted(stems - skip)
    paths: dict[str, str | Path] = {}
    for name in names:
        dense, sparse = directory / f"{name}.csv", directory / f"{name}.mtx"
        if dense.exists():
            paths[name] = dense
        elif sparse.exists():
            paths[name] = sparse
        else:
            raise DataValidationError(f"{directory}: no file for modality {name!r}")
    labels = directory / "labels.csv"
    return load_dataset(coords, paths, labels if labels.exists() else None)


def _write_csv(path: Path, header: list[str], rows, manifest_hash: str | None):
    with open(path, "w", newline="") as fh:
        if manifest_hash:
            fh.write(f"# manifest={manifest_hash}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def save_dataset(
    dataset: SpotDataset,
    out_dir: str | Path,
    manifest_hash: str | None = None,
    sparse: tuple[str, ...] = (),
) -> list[Path]:
    """Write a dataset directory (see load_dataset_dir). Modalities listed
    in `sparse` go to Matrix Market files with a spot-id sidecar."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []

    path = out / "coords.csv"
    _write_csv(path, ["spot_id", "x", "y"],
               ([sid, repr(float(x)), repr(float(y))]
                for sid, (x, y) in zip(dataset.spot_ids, dataset.coords)),
               manifest_hash)
    written.append(path)

    for name, mat in dataset.modalities.items():
        if name in sparse:
            path = out / f"{name}.mtx"
            mmwrite(path, coo_matrix(mat))
            sidecar = out / f"{name}.spots.txt"
            sidecar.write_text("".join(f"{sid}\n" for sid in dataset.spot_ids))
            written += [path, sidecar]
        else:
            path = out / f"{name}.csv"
            header = ["spot_id"] + [f"f{j + 1}" for j in range(mat.shape[1])]
            _write_csv(path, header,
                       ([sid] + [repr(float(v)) for v in row]
                        for sid, row in zip(dataset.spot_ids, mat)),
                       manifest_hash)
            written.append(path)

    order_file = out / "modalities.txt"
    order_file.write_text("".join(f"{name}\n" for name in dataset.modalities))
    written.append(order_file)

    if dataset.labels is not None:
        path = out / "labels.csv"
        _write_csv(path, ["spot_id", "label"],
                   ([sid, str(lab)] for sid, lab in zip(dataset.spot_ids, dataset.labels)),
                   manifest_hash)
        written.append(path)
    return written
