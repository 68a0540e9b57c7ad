"""Full-batch training loop, configuration, and embedding extraction."""

from __future__ import annotations

import csv
import dataclasses
import logging
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np
import torch
from torch import Tensor

from . import alignment, fusion
from .data_io import SpotDataset
from .encoder import ModalityEmbeddings, dense_operator, encode_all, freeze_shared_spatial
from .errors import CheckpointError, ConfigurationError, TrainingError
from .graph import GraphBundle, build_graphs
from .neural import DTYPE, AdamState, FusionModel, adam_step

logger = logging.getLogger(__name__)

# accepted spellings in config files / sweep params for dataclass fields
KEY_ALIASES = {"lambda": "lam"}


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters and switches for one training run."""

    epochs: int = 300
    lr: float = 1e-3
    lam: float = 2.0          # weight of the alignment loss
    gamma: float = 0.3        # gate confidence threshold
    tau: float = 0.5          # contrastive temperature
    delta: float = 0.9        # mask similarity threshold
    k_spatial: int = 6
    k_feature: int = 20
    d_latent: int = 64
    d_att: int = 32
    spline_grid: int = 8
    n_layers: int = 2
    seed: int = 0
    no_moe: bool = False
    no_contrast: bool = False
    no_kan: bool = False
    share_spatial: bool = True
    share_attention: bool = False
    threads: int = 1

    def validate(self):
        if self.epochs < 0:
            raise ConfigurationError("epochs must be >= 0")
        if self.lr <= 0:
            raise ConfigurationError("lr must be positive")
        if self.lam < 0:
            raise ConfigurationError("lam must be >= 0")
        if not 0.0 < self.gamma < 1.0:
            raise ConfigurationError("gamma must be in (0, 1)")
        if self.tau <= 0:
            raise ConfigurationError("tau must be positive")
        if min(self.k_spatial, self.k_feature) < 1:
            raise ConfigurationError("graph neighbour counts must be >= 1")
        if min(self.d_latent, self.d_att, self.n_layers, self.threads) < 1:
            raise ConfigurationError("d_latent, d_att, n_layers, threads must be >= 1")
        if self.spline_grid < 4:
            raise ConfigurationError("spline_grid must be >= 4")

    def replace(self, **kwargs) -> "TrainConfig":
        return dataclasses.replace(self, **kwargs)

    def to_mapping(self) -> dict[str, str]:
        return {f.name: str(getattr(self, f.name)).lower() if f.type == "bool"
                else str(getattr(self, f.name))
                for f in fields(self)}


def _coerce(field, raw):
    if field.type == "bool":
        if isinstance(raw, bool):
            return raw
        text = str(raw).strip().lower()
        if text in ("true", "1", "yes"):
            return True
        if text in ("false", "0", "no"):
            return False
        raise ConfigurationError(f"{field.name}: expected a boolean, got {raw!r}")
    try:
        return {"int": int, "float": float}[field.type](raw)
    except (KeyError, ValueError) as exc:
        raise ConfigurationError(f"{field.name}: cannot parse {raw!r}") from exc


def config_from_mapping(mapping: dict, base: TrainConfig | None = None) -> TrainConfig:
    """Build a config from key/value pairs, rejecting unknown keys."""
    by_name = {f.name: f for f in fields(TrainConfig)}
    values = {}
    for key, raw in mapping.items():
        name = KEY_ALIASES.get(key, key)
        if name not in by_name:
            raise ConfigurationError(
                f"unknown config key {key!r}; known keys: {sorted(by_name)}"
            )
        values[name] = _coerce(by_name[name], raw)
    cfg = (base or TrainConfig()).replace(**values)
    cfg.validate()
    return cfg


def parse_config_file(path: str | Path) -> dict[str, str]:
    """Read a flat key=value file ('#' starts a comment)."""
    mapping = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        if "=" not in text:
            raise ConfigurationError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, value = text.split("=", 1)
        mapping[key.strip()] = value.strip()
    return mapping


@dataclass
class PassResult:
    """Losses and intermediate tensors of one full-batch forward pass."""

    embeddings: dict[str, ModalityEmbeddings]
    decision: fusion.GateDecision | None
    fused: fusion.FusedRepresentation
    reconstructions: dict[str, Tensor]
    rec_losses: dict[str, Tensor]
    contrast_terms: dict[tuple[str, str], Tensor]
    total: Tensor


def forward_pass(
    model: FusionModel,
    features: dict[str, Tensor],
    adj_spatial: Tensor,
    adj_feature: dict[str, Tensor],
    config: TrainConfig,
) -> PassResult:
    """Encode, align, fuse, and reconstruct; returns every loss component."""
    embeddings = encode_all(model, features, adj_spatial, adj_feature)
    fused_views = {name: emb.fused for name, emb in embeddings.items()}

    if config.no_contrast or len(fused_views) < 2:
        contrast_terms = {}
        contrast_total: Tensor | float = 0.0
    else:
        contrast_terms = alignment.contrastive_terms(fused_views, config.delta, config.tau)
        contrast_total = sum(contrast_terms.values())

    decision = None
    if not config.no_moe:
        decision = fusion.gate(fused_views, model.gate_weight, config.gamma)
    fused = fusion.fuse(fused_views, model.experts, decision)
    reconstructions = fusion.decode(fused.z, adj_spatial, model.decoders)
    rec_losses = {
        name: fusion.reconstruction_loss(features[name], reconstructions[name])
        for name in model.modality_names
    }
    total = fusion.total_loss(rec_losses.values(), contrast_total, config.lam)
    return PassResult(
        embeddings=embeddings,
        decision=decision,
        fused=fused,
        reconstructions=reconstructions,
        rec_losses=rec_losses,
        contrast_terms=contrast_terms,
        total=total,
    )


@dataclass
class TrainResult:
    model: FusionModel
    config: TrainConfig
    graphs: GraphBundle
    log: list[dict]


def _tensorize(dataset: SpotDataset) -> dict[str, Tensor]:
    return {name: torch.from_numpy(mat.copy()).to(DTYPE)
            for name, mat in dataset.modalities.items()}


def _log_row(epoch: int, result: PassResult, names) -> dict:
    row = {"epoch": epoch}
    for name in names:
        row[f"rec_{name}"] = result.rec_losses[name].detach().item()
    for (m1, m2), term in sorted(result.contrast_terms.items()):
        row[f"contrast_{m1}_{m2}"] = term.detach().item()
    row["total"] = result.total.detach().item()
    return row


def _check_finite(epoch: int, result: PassResult):
    for name, term in result.rec_losses.items():
        if not torch.isfinite(term):
            raise TrainingError(f"epoch {epoch}: non-finite reconstruction loss for {name!r}")
    for pair, term in result.contrast_terms.items():
        if not torch.isfinite(term):
            raise TrainingError(f"epoch {epoch}: non-finite contrastive loss for pair {pair}")
    if not torch.isfinite(result.total):
        raise TrainingError(f"epoch {epoch}: non-finite total loss")


def train(
    dataset: SpotDataset,
    config: TrainConfig,
    graphs: GraphBundle | None = None,
) -> TrainResult:
    """Train on the full dataset; deterministic given (dataset, config).

    Graphs are built once up front and stay fixed. Epoch 0 means: return
    the initialized model untouched with an empty loss log.
    """
    config.validate()
    torch.set_num_threads(config.threads)
    if graphs is None:
        graphs = build_graphs(
            dataset.coords, dict(dataset.modalities),
            k_spatial=config.k_spatial, k_feature=config.k_feature,
        )
    features = _tensorize(dataset)
    adj_spatial = dense_operator(graphs.spatial)
    adj_feature = {name: dense_operator(adj) for name, adj in graphs.feature.items()}

    dims = {name: mat.shape[1] for name, mat in dataset.modalities.items()}
    model = FusionModel(
        modality_dims=dims,
        d_latent=config.d_latent,
        d_att=config.d_att,
        grid_size=config.spline_grid,
        n_layers=config.n_layers,
        share_spatial=config.share_spatial,
        share_attention=config.share_attention,
        seed=config.seed,
    )

    # warm-up pass freezes every normalization buffer before the first update
    freeze_shared_spatial(model, features, adj_spatial)
    with torch.no_grad():
        forward_pass(model, features, adj_spatial, adj_feature, config)

    params = model.trainable(include_splines=not config.no_kan)
    state = AdamState.init(params)
    log: list[dict] = []
    names = model.modality_names
    for epoch in range(1, config.epochs + 1):
        result = forward_pass(model, features, adj_spatial, adj_feature, config)
        _check_finite(epoch, result)
        grads = torch.autograd.grad(result.total, list(params.values()), allow_unused=True)
        adam_step(params, dict(zip(params, grads)), state, config.lr)
        log.append(_log_row(epoch, result, names))
        if epoch == 1 or epoch % 50 == 0 or epoch == config.epochs:
            logger.info("epoch %d: total=%.6f", epoch, log[-1]["total"])
    return TrainResult(model=model, config=config, graphs=graphs, log=log)


@dataclass
class EmbedResult:
    """Deterministic forward-pass outputs on a frozen model."""

    z: np.ndarray
    decision: fusion.GateDecision | None
    embeddings: dict[str, ModalityEmbeddings]


def embed(
    model: FusionModel,
    dataset: SpotDataset,
    config: TrainConfig,
    graphs: GraphBundle | None = None,
) -> EmbedResult:
    """One forward pass without gradients; returns the fused latent."""
    dims = {name: mat.shape[1] for name, mat in dataset.modalities.items()}
    if dims != model.modality_dims:
        raise CheckpointError(
            f"model was trained on modalities {model.modality_dims}, dataset has {dims}"
        )
    torch.set_num_threads(config.threads)
    if graphs is None:
        graphs = build_graphs(
            dataset.coords, dict(dataset.modalities),
            k_spatial=config.k_spatial, k_feature=config.k_feature,
        )
    features = _tensorize(dataset)
    adj_spatial = dense_operator(graphs.spatial)
    adj_feature = {name: dense_operator(adj) for name, adj in graphs.feature.items()}
    with torch.no_grad():
        result = forward_pass(model, features, adj_spatial, adj_feature, config)
    return EmbedResult(
        z=result.fused.z.numpy().copy(),
        decision=result.decision,
        embeddings=result.embeddings,
    )


def write_loss_log(log: list[dict], path: str | Path, manifest_hash: str | None = None):
    """Loss components per epoch as CSV, one column per component."""
    if not log:
        columns = ["epoch", "total"]
    else:
        columns = list(log[0])
    with open(path, "w", newline="") as fh:
        if manifest_hash:
            fh.write(f"# manifest={manifest_hash}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in log:
            writer.writerow([repr(row[c]) if isinstance(row[c], float) else str(row[c])
                             for c in columns])


def read_loss_log(path: str | Path) -> list[dict]:
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(line for line in fh if not line.startswith("#"))
        header = next(reader)
        for row in reader:
            parsed = {header[0]: int(row[0])}
            parsed.update({k: float(v) for k, v in zip(header[1:], row[1:])})
            rows.append(parsed)
    return rows
