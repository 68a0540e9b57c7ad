"""Trainable building blocks: spline layers, expert FFNs, Adam, gradient
checking, and checkpoint IO.

Everything runs in float64 on CPU so that training is bit-reproducible and
finite-difference checks are not drowned by roundoff.
"""

from __future__ import annotations

import io
import json
import logging
import zipfile
from dataclasses import dataclass

import numpy as np
import torch
from torch import Tensor, nn

from .errors import CheckpointError, ConfigurationError, TrainingError

logger = logging.getLogger(__name__)

DTYPE = torch.float64
SPLINE_DEGREE = 3  # cubic
NORM_PAD = 0.05  # fraction of the observed range kept as margin on each side
GATE_FAN_SCALE = 1  # multiplier on the gate's fan-in for its uniform init range
CHECKPOINT_TAG = "spotfuse-checkpoint-v1"


def clamped_uniform_knots(grid_size: int) -> Tensor:
    """Knot vector for `grid_size` cubic B-spline basis functions on [0, 1].

    Ends are repeated degree+1 times so the basis is clamped: the first
    function equals 1 at x=0 and the last equals 1 at x=1.
    """
    if grid_size < SPLINE_DEGREE + 1:
        raise ValueError(f"grid_size must be >= {SPLINE_DEGREE + 1}, got {grid_size}")
    interior = torch.linspace(0.0, 1.0, grid_size - SPLINE_DEGREE + 1, dtype=DTYPE)[1:-1]
    ends = torch.zeros(SPLINE_DEGREE + 1, dtype=DTYPE)
    return torch.cat([ends, interior, ends + 1.0])


def spline_basis(x: Tensor | float, knots: Tensor) -> Tensor:
    """Evaluate all B-spline basis functions at x (clamped to [0, 1]).

    Cox-de Boor recursion, vectorized over any leading shape; returns
    shape (*x.shape, G). Zero-length spans contribute 0/0 := 0. The last
    nonempty interval is closed on the right so the basis still sums to 1
    at x = 1.
    """
    if not torch.is_tensor(x):
        x = torch.tensor(x, dtype=DTYPE)
    x = x.clamp(0.0, 1.0).unsqueeze(-1)
    left, right = knots[:-1], knots[1:]
    at_end = (x == 1.0) & (right == 1.0) & (left < right)
    bases = (((x >= left) & (x < right)) | at_end).to(x.dtype)
    for k in range(1, SPLINE_DEGREE + 1):
        den_l = knots[k:-1] - knots[: -(k + 1)]
        den_r = knots[k + 1:] - knots[1:-k]
        term_l = torch.where(den_l > 0, (x - knots[: -(k + 1)]) / torch.where(den_l > 0, den_l, 1.0), 0.0)
        term_r = torch.where(den_r > 0, (knots[k + 1:] - x) / torch.where(den_r > 0, den_r, 1.0), 0.0)
        bases = term_l * bases[..., :-1] + term_r * bases[..., 1:]
    return bases


def _init_uniform(tensor: Tensor, fan_in: int, generator: torch.Generator):
    bound = 1.0 / np.sqrt(fan_in)
    with torch.no_grad():
        tensor.uniform_(-bound, bound, generator=generator)


class KanLayer(nn.Module):
    """One spline-augmented linear layer.

    Each output unit q sums learnable univariate functions of the inputs:
    a linear term plus a B-spline expansion over [0, 1]. Inputs pass
    through a per-column min-max normalization whose statistics freeze at
    the first forward pass (with a padding margin so those inputs land
    strictly inside the interval). Inputs that later drift outside the
    frozen span saturate the spline term (the basis clamps internally)
    but keep flowing through the linear term, so the layer degrades to
    affine behavior out of range instead of going gradient-dead. This
    matters for layers whose inputs are trained quantities (embeddings)
    rather than fixed data.
    """

    def __init__(self, in_dim: int, out_dim: int, grid_size: int = 8):
        super().__init__()
        if in_dim < 1 or out_dim < 1:
            raise ValueError("layer dims must be >= 1")
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.grid_size = grid_size
        self.linear_coeff = nn.Parameter(torch.zeros(out_dim, in_dim, dtype=DTYPE))
        self.spline_coeff = nn.Parameter(torch.zeros(out_dim, in_dim, grid_size, dtype=DTYPE))
        self.register_buffer("knots", clamped_uniform_knots(grid_size))
        self.register_buffer("norm_lo", torch.zeros(in_dim, dtype=DTYPE))
        self.register_buffer("norm_span", torch.ones(in_dim, dtype=DTYPE))
        self.register_buffer("norm_frozen", torch.tensor(0, dtype=torch.int64))

    def init_weights(self, generator: torch.Generator):
        _init_uniform(self.linear_coeff, self.in_dim, generator)
        # spline_coeff stays zero: training starts at the plain linear point

    @property
    def frozen(self) -> bool:
        return bool(self.norm_frozen.item())

    def set_normalization(self, lo, span):
        """Pin the input map x̂ = (x - lo) / span directly (no padding)."""
        lo = torch.as_tensor(lo, dtype=DTYPE).expand(self.in_dim).clone()
        span = torch.as_tensor(span, dtype=DTYPE).expand(self.in_dim).clone()
        if (span <= 0).any():
            raise ValueError("normalization span must be positive")
        self.norm_lo.copy_(lo)
        self.norm_span.copy_(span)
        self.norm_frozen.fill_(1)

    def freeze_normalization(self, x: Tensor):
        """Freeze per-column min-max stats from a batch, with padding margin."""
        if self.frozen:
            raise ConfigurationError("normalization statistics are already frozen")
        x = x.detach()
        lo = x.min(dim=0).values
        hi = x.max(dim=0).values
        pad = NORM_PAD * (hi - lo)
        span = (hi - lo) + 2.0 * pad
        flat = span <= 0  # constant column: pin to midpoint 0.5
        self.norm_lo.copy_(torch.where(flat, lo - 0.5, lo - pad))
        self.norm_span.copy_(torch.where(flat, torch.ones_like(span), span))
        self.norm_frozen.fill_(1)

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ValueError(f"expected input of shape (n, {self.in_dim}), got {tuple(x.shape)}")
        if not self.frozen:
            self.freeze_normalization(x)
        xn = (x - self.norm_lo) / self.norm_span
        bases = spline_basis(xn, self.knots)
        return xn @ self.linear_coeff.T + torch.einsum("nig,oig->no", bases, self.spline_coeff)


class Ffn(nn.Module):
    """Two-layer ReLU expert: d -> hidden -> d."""

    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.w1 = nn.Parameter(torch.zeros(hidden, dim, dtype=DTYPE))
        self.b1 = nn.Parameter(torch.zeros(hidden, dtype=DTYPE))
        self.w2 = nn.Parameter(torch.zeros(dim, hidden, dtype=DTYPE))
        self.b2 = nn.Parameter(torch.zeros(dim, dtype=DTYPE))

    def init_weights(self, generator: torch.Generator):
        _init_uniform(self.w1, self.w1.shape[1], generator)
        _init_uniform(self.b1, self.w1.shape[1], generator)
        _init_uniform(self.w2, self.w2.shape[1], generator)
        _init_uniform(self.b2, self.w2.shape[1], generator)

    def forward(self, x: Tensor) -> Tensor:
        return torch.relu(x @ self.w1.T + self.b1) @ self.w2.T + self.b2


class AttentionParams(nn.Module):
    """Scoring parameters for two-way spatial/feature attention fusion."""

    def __init__(self, d_latent: int, d_att: int):
        super().__init__()
        self.proj = nn.Parameter(torch.zeros(d_att, d_latent, dtype=DTYPE))
        self.bias = nn.Parameter(torch.zeros(d_att, dtype=DTYPE))
        self.query = nn.Parameter(torch.zeros(d_att, dtype=DTYPE))

    def init_weights(self, generator: torch.Generator):
        _init_uniform(self.proj, self.proj.shape[1], generator)
        _init_uniform(self.bias, self.proj.shape[1], generator)
        _init_uniform(self.query, self.query.shape[0], generator)

    def score(self, emb: Tensor) -> Tensor:
        return torch.tanh(emb @ self.proj.T + self.bias) @ self.query


class FusionModel(nn.Module):
    """All trainable tensors of the pipeline, registered once under stable names.

    Holds the spatial KAN-GCN stack (shared across modalities by default),
    per-modality feature stacks, attention fusers, the gating matrix,
    per-modality experts, and per-modality decoder layers.
    """

    def __init__(
        self,
        modality_dims: dict[str, int],
        d_latent: int = 64,
        d_att: int = 32,
        grid_size: int = 8,
        n_layers: int = 2,
        share_spatial: bool = True,
        share_attention: bool = False,
        seed: int = 0,
    ):
        super().__init__()
        if len(modality_dims) < 1:
            raise ConfigurationError("at least one modality is required")
        if n_layers < 1:
            raise ConfigurationError("n_layers must be >= 1")
        if share_spatial and len(set(modality_dims.values())) > 1:
            raise ConfigurationError(
                f"shared spatial stack requires equal feature widths, got {modality_dims};"
                " reduce with --pca-dim or set share_spatial=false"
            )
        self.modality_dims = dict(modality_dims)
        self.d_latent = d_latent
        self.d_att = d_att
        self.grid_size = grid_size
        self.n_layers = n_layers
        self.share_spatial = share_spatial
        self.share_attention = share_attention

        names = list(modality_dims)

        def stack(in_dim):
            widths = [in_dim] + [d_latent] * n_layers
            return nn.ModuleList(
                KanLayer(widths[i], widths[i + 1], grid_size) for i in range(n_layers)
            )

        if share_spatial:
            self.spatial_stack = stack(next(iter(modality_dims.values())))
        else:
            self.spatial_stacks = nn.ModuleDict({m: stack(d) for m, d in modality_dims.items()})
        self.feature_stacks = nn.ModuleDict({m: stack(d) for m, d in modality_dims.items()})
        if share_attention:
            self.attention = AttentionParams(d_latent, d_att)
        else:
            self.attentions = nn.ModuleDict({m: AttentionParams(d_latent, d_att) for m in names})
        self.gate_weight = nn.Parameter(torch.zeros(d_latent, len(names), dtype=DTYPE))
        self.experts = nn.ModuleDict({m: Ffn(d_latent, 2 * d_latent) for m in names})
        self.decoders = nn.ModuleDict({m: KanLayer(d_latent, d, grid_size) for m, d in modality_dims.items()})
        self._init_all(seed)

    def _init_all(self, seed: int):
        # one generator, fixed module order: init draws do not depend on
        # ablation flags, only on architecture shape
        gen = torch.Generator().manual_seed(seed)
        for module in self.modules():
            if module is not self and hasattr(module, "init_weights"):
                module.init_weights(gen)
        # the gate follows the same fan-in rule as the other weights; a much
        # smaller init range pins the logit spread near zero for hundreds of
        # epochs and the router never differentiates the modalities
        _init_uniform(self.gate_weight, GATE_FAN_SCALE * self.d_latent, gen)

    @property
    def modality_names(self) -> tuple[str, ...]:
        return tuple(self.modality_dims)

    def spatial_layers(self, modality: str) -> nn.ModuleList:
        return self.spatial_stack if self.share_spatial else self.spatial_stacks[modality]

    def attention_params(self, modality: str) -> AttentionParams:
        return self.attention if self.share_attention else self.attentions[modality]

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def trainable(self, include_splines: bool = True) -> dict[str, Tensor]:
        """Name -> parameter map in registration order."""
        return {
            name: p
            for name, p in self.named_parameters()
            if include_splines or not name.endswith("spline_coeff")
        }


def expected_parameter_count(
    modality_dims: dict[str, int],
    d_latent: int,
    d_att: int,
    grid_size: int,
    n_layers: int,
    share_spatial: bool,
    share_attention: bool,
) -> int:
    """Parameter count as a pure function of configuration."""
    def layer(i, o):
        return o * i * (1 + grid_size)

    def stack(d):
        widths = [d] + [d_latent] * n_layers
        return sum(layer(widths[i], widths[i + 1]) for i in range(n_layers))

    m = len(modality_dims)
    total = 0
    if share_spatial:
        total += stack(next(iter(modality_dims.values())))
    else:
        total += sum(stack(d) for d in modality_dims.values())
    total += sum(stack(d) for d in modality_dims.values())  # feature stacks
    att = d_att * d_latent + 2 * d_att
    total += att if share_attention else m * att
    total += d_latent * m  # gate
    total += m * (2 * (d_latent * 2 * d_latent) + 2 * d_latent + d_latent)  # experts
    total += sum(layer(d_latent, d) for d in modality_dims.values())  # decoders
    return total


@dataclass
class AdamState:
    """First/second moment accumulators keyed like the parameter map."""

    step: int
    exp_avg: dict[str, Tensor]
    exp_avg_sq: dict[str, Tensor]

    @classmethod
    def init(cls, params: dict[str, Tensor]) -> "AdamState":
        return cls(
            step=0,
            exp_avg={k: torch.zeros_like(v) for k, v in params.items()},
            exp_avg_sq={k: torch.zeros_like(v) for k, v in params.items()},
        )


def adam_step(
    params: dict[str, Tensor],
    grads: dict[str, Tensor | None],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> AdamState:
    """One Adam update, in place on params. Missing/None grads count as zero."""
    state.step += 1
    bc1 = 1.0 - beta1**state.step
    bc2 = 1.0 - beta2**state.step
    with torch.no_grad():
        for name, p in params.items():
            g = grads.get(name)
            if g is None:
                g = torch.zeros_like(p)
            if not torch.isfinite(g).all():
                raise TrainingError(f"non-finite gradient for parameter {name!r}")
            m = state.exp_avg[name]
            v = state.exp_avg_sq[name]
            m.mul_(beta1).add_(g, alpha=1.0 - beta1)
            v.mul_(beta2).addcmul_(g, g, value=1.0 - beta2)
            p.sub_(lr * (m / bc1) / ((v / bc2).sqrt() + eps))
    return state


def grad_check(
    loss_fn,
    params: dict[str, Tensor],
    eps: float = 1e-4,
    seed: int = 0,
    min_coords: int = 32,
) -> dict[str, float]:
    """Max relative error between autograd and central differences, per tensor.

    Samples at least `min_coords` coordinates per tensor (all of them for
    small tensors). Relative error uses max(|analytic|, |numeric|, 1e-6)
    in the denominator; a parameter the loss never touches must come back
    exactly zero on both routes.
    """
    loss = loss_fn()
    if not torch.isfinite(loss):
        raise TrainingError("grad_check: loss is non-finite")
    analytic = torch.autograd.grad(loss, list(params.values()), allow_unused=True)
    rng = np.random.default_rng(seed)
    report = {}
    with torch.no_grad():
        for (name, p), grad in zip(params.items(), analytic):
            flat = p.view(-1)
            total = flat.numel()
            if total <= min_coords:
                coords = np.arange(total)
            else:
                coords = rng.choice(total, size=min_coords, replace=False)
            gflat = torch.zeros(total, dtype=DTYPE) if grad is None else grad.reshape(-1)
            worst = 0.0
            for c in coords:
                c = int(c)
                orig = flat[c].item()
                flat[c] = orig + eps
                f_plus = float(loss_fn())
                flat[c] = orig - eps
                f_minus = float(loss_fn())
                flat[c] = orig
                numeric = (f_plus - f_minus) / (2.0 * eps)
                a = float(gflat[c])
                rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-6)
                worst = max(worst, rel)
            report[name] = worst
    return report


def _npy_bytes(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    np.save(buf, arr, allow_pickle=False)
    return buf.getvalue()


def save_checkpoint(path, model: FusionModel, meta: dict) -> None:
    """Write model tensors and metadata to a deterministic zip archive.

    Every parameter and buffer goes to an .npy member (the npy header
    carries shape and dtype); member timestamps are pinned so identical
    states produce byte-identical files.
    """
    header = {
        "format": CHECKPOINT_TAG,
        "modality_dims": model.modality_dims,
        "d_latent": model.d_latent,
        "d_att": model.d_att,
        "grid_size": model.grid_size,
        "n_layers": model.n_layers,
        "share_spatial": model.share_spatial,
        "share_attention": model.share_attention,
        "meta": meta,
    }
    tensors = list(model.named_parameters()) + list(model.named_buffers())
    with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as zf:
        def add(name, payload):
            info = zipfile.ZipInfo(name, date_time=(1980, 1, 1, 0, 0, 0))
            zf.writestr(info, payload)

        add("meta.json", json.dumps(header, indent=1, sort_keys=False))
        for name, tensor in tensors:
            add(f"tensors/{name}.npy", _npy_bytes(tensor.detach().numpy()))
    logger.info("checkpoint written: %s (%d tensors)", path, len(tensors))


def load_checkpoint(path) -> tuple[FusionModel, dict]:
    """Rebuild a FusionModel from an archive; returns (model, meta)."""
    try:
        with zipfile.ZipFile(path) as zf:
            header = json.loads(zf.read("meta.json"))
            if header.get("format") != CHECKPOINT_TAG:
                raise CheckpointError(f"{path}: unknown checkpoint format {header.get('format')!r}")
            model = FusionModel(
                modality_dims=header["modality_dims"],
                d_latent=header["d_latent"],
                d_att=header["d_att"],
                grid_size=header["grid_size"],
                n_layers=header["n_layers"],
                share_spatial=header["share_spatial"],
                share_attention=header["share_attention"],
            )
            tensors = dict(model.named_parameters()) | dict(model.named_buffers())
            seen = set()
            for member in zf.namelist():
                if not member.startswith("tensors/"):
                    continue
                name = member[len("tensors/"):-len(".npy")]
                if name not in tensors:
                    raise CheckpointError(f"{path}: unexpected tensor {name!r}")
                arr = np.load(io.BytesIO(zf.read(member)), allow_pickle=False)
                target = tensors[name]
                if tuple(arr.shape) != tuple(target.shape):
                    raise CheckpointError(
                        f"{path}: tensor {name!r} has shape {arr.shape}, expected {tuple(target.shape)}"
                    )
                with torch.no_grad():
                    target.copy_(torch.from_numpy(arr))
                seen.add(name)
            missing = set(tensors) - seen
            if missing:
                raise CheckpointError(f"{path}: missing tensors {sorted(missing)[:5]}")
    except (zipfile.BadZipFile, KeyError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable checkpoint ({exc})") from exc
    return model, header["meta"]
