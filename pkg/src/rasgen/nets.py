"""Differentiable building blocks of the inverse-design model.

Condition embedder (target spectrum + substrate parameters, with a learned
null token for unconditional training), FiLM-conditioned residual U-Net
noise predictor, convolutional spectrum surrogate, cosine learning-rate
schedule, finite-difference gradient checking, and the versioned checkpoint
format.
"""

from __future__ import annotations

import copy
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

SPECTRUM_DIM = 201
SPECTRUM_EMBED_DIM = 96
MATERIAL_EMBED_DIM = 32
CONDITION_DIM = SPECTRUM_EMBED_DIM + MATERIAL_EMBED_DIM
TIME_EMBED_DIM = 64

# fixed standardization of (eps_r, tan_delta, thickness_mm)
_MATERIAL_SCALE = (0.1, 100.0, 0.2)

CHECKPOINT_MAGIC = b"RASGENCKPT"
CHECKPOINT_SCHEMA = 1


def standardize_material(materials: torch.Tensor) -> torch.Tensor:
    scale = torch.tensor(_MATERIAL_SCALE, dtype=materials.dtype, device=materials.device)
    return materials * scale


@dataclass
class Condition:
    """One conditioning record: target spectrum + substrate parameters.

    is_null selects the learned null token; spectrum and material are then
    ignored (they may be zeros).
    """

    spectrum: np.ndarray
    material: np.ndarray  # (eps_r, tan_delta, thickness_mm)
    is_null: bool = False

    @staticmethod
    def null() -> "Condition":
        return Condition(
            spectrum=np.zeros(SPECTRUM_DIM), material=np.zeros(3), is_null=True
        )

    @staticmethod
    def batch(conditions: list["Condition"]) -> tuple[torch.Tensor, ...]:
        """Stack records into (spectra, materials, null_mask) tensors."""
        spectra = torch.tensor(
            np.stack([c.spectrum for c in conditions]), dtype=torch.float32
        )
        materials = torch.tensor(
            np.stack([c.material for c in conditions]), dtype=torch.float32
        )
        null_mask = torch.tensor([c.is_null for c in conditions], dtype=torch.bool)
        return spectra, materials, null_mask


class ConditionEmbedder(nn.Module):
    """Embeds (spectrum, material) pairs into one condition vector.

    The two physical inputs run through separate two-layer MLPs and are
    concatenated; rows flagged as null receive a learned embedding instead
    and never touch the real pathway (and vice versa), which the row
    counters make observable.
    """

    def __init__(
        self,
        spectrum_dim: int = SPECTRUM_DIM,
        spectrum_embed_dim: int = SPECTRUM_EMBED_DIM,
        material_embed_dim: int = MATERIAL_EMBED_DIM,
    ):
        super().__init__()
        self.out_dim = spectrum_embed_dim + material_embed_dim
        self.spectrum_net = nn.Sequential(
            nn.Linear(spectrum_dim, spectrum_embed_dim),
            nn.SiLU(),
            nn.Linear(spectrum_embed_dim, spectrum_embed_dim),
        )
        self.material_net = nn.Sequential(
            nn.Linear(3, material_embed_dim),
            nn.SiLU(),
            nn.Linear(material_embed_dim, material_embed_dim),
        )
        self.null_embedding = nn.Parameter(torch.randn(self.out_dim) * 0.02)
        self.cond_rows_seen = 0
        self.null_rows_seen = 0

    def forward(
        self,
        spectra: torch.Tensor,
        materials: torch.Tensor,
        null_mask: torch.Tensor | None = None,
    ) -> torch.Tensor:
        if spectra.shape[-1] != self.spectrum_net[0].in_features:
            raise ValueError(
                f"expected spectra of length {self.spectrum_net[0].in_features}, "
                f"got {spectra.shape[-1]}"
            )
        b = spectra.shape[0]
        if null_mask is None:
            null_mask = torch.zeros(b, dtype=torch.bool, device=spectra.device)
        out = spectra.new_zeros(b, self.out_dim)
        real = ~null_mask
        if bool(real.any()):
            e_s = self.spectrum_net(spectra[real])
            e_m = self.material_net(standardize_material(materials[real]))
            out = out.index_put((real.nonzero(as_tuple=True)[0],),
                                torch.cat([e_s, e_m], dim=-1))
            self.cond_rows_seen += int(real.sum())
        if bool(null_mask.any()):
            idx = null_mask.nonzero(as_tuple=True)[0]
            out = out.index_put(
                (idx,), self.null_embedding.to(out.dtype).expand(idx.numel(), -1)
            )
            self.null_rows_seen += int(null_mask.sum())
        return out

    def reset_counters(self) -> None:
        self.cond_rows_seen = 0
        self.null_rows_seen = 0


def sinusoidal_time_embedding(t: torch.Tensor, dim: int = TIME_EMBED_DIM) -> torch.Tensor:
    """Classic sin/cos positional features of the (1-indexed) timestep."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0)
        * torch.arange(half, dtype=t.dtype, device=t.device)
        / (half - 1)
    )
    args = t[:, None] * freqs[None, :]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


class FiLM(nn.Module):
    """Per-channel affine modulation of a feature map, driven by a vector.

    The projection starts at zero so modulation begins as the identity
    (gamma = 1, beta = 0).
    """

    def __init__(self, cond_dim: int, channels: int):
        super().__init__()
        self.channels = channels
        self.proj = nn.Linear(cond_dim, 2 * channels)
        nn.init.zeros_(self.proj.weight)
        nn.init.zeros_(self.proj.bias)

    def forward(self, fmap: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        if fmap.shape[1] != self.channels:
            raise ValueError(f"expected {self.channels} channels, got {fmap.shape[1]}")
        d_gamma, beta = self.proj(cond).chunk(2, dim=-1)
        gamma = 1.0 + d_gamma
        return gamma[:, :, None, None] * fmap + beta[:, :, None, None]


def _norm_groups(channels: int) -> int:
    for g in (8, 4, 2):
        if channels % g == 0:
            return g
    return 1


class FiLMResBlock(nn.Module):
    """Residual conv block whose mid features are FiLM-modulated."""

    def __init__(self, in_channels: int, out_channels: int, cond_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(_norm_groups(in_channels), in_channels)
        self.conv1 = nn.Conv2d(in_channels, out_channels, 3, padding=1)
        self.norm2 = nn.GroupNorm(_norm_groups(out_channels), out_channels)
        self.film = FiLM(cond_dim, out_channels)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, padding=1)
        self.skip = (
            nn.Identity()
            if in_channels == out_channels
            else nn.Conv2d(in_channels, out_channels, 1)
        )
        self.act = nn.SiLU()

    def forward(self, x: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        h = self.conv1(self.act(self.norm1(x)))
        h = self.film(self.norm2(h), cond)
        h = self.conv2(self.act(h))
        return h + self.skip(x)


class _Upsample(nn.Module):
    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.conv = nn.Conv2d(in_channels, out_channels, 3, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.conv(nn.functional.interpolate(x, scale_factor=2, mode="nearest"))


FILM_CONDITIONING = "film"
INPUT_CONCAT_CONDITIONING = "input_concat"


@dataclass
class DenoiserConfig:
    base_width: int = 32
    cond_dim: int = CONDITION_DIM
    time_dim: int = TIME_EMBED_DIM
    in_channels: int = 3
    spectrum_dim: int = SPECTRUM_DIM
    spectrum_embed_dim: int = SPECTRUM_EMBED_DIM
    material_embed_dim: int = MATERIAL_EMBED_DIM
    conditioning: str = FILM_CONDITIONING
    cond_input_channels: int = 4

    def __post_init__(self) -> None:
        if self.conditioning not in (FILM_CONDITIONING, INPUT_CONCAT_CONDITIONING):
            raise ValueError(f"unknown conditioning {self.conditioning!r}")
        if self.cond_dim != self.spectrum_embed_dim + self.material_embed_dim:
            raise ValueError("cond_dim must equal spectrum + material embed dims")


class DenoiserUNet(nn.Module):
    """Noise predictor: 3-level U-Net with 2 FiLM ResBlocks per level.

    Resolutions 32 -> 16 -> 8 at widths w, 2w, 4w; skip connections are
    channel concatenations. The timestep enters through a sinusoidal
    embedding added to the condition pathway. In input_concat mode the
    condition is instead projected to extra input channels and the FiLM
    pathway carries only time (the ablation baseline).
    """

    def __init__(self, config: DenoiserConfig | None = None):
        super().__init__()
        cfg = config or DenoiserConfig()
        self.config = cfg
        w = cfg.base_width
        cd = cfg.cond_dim
        self.embedder = ConditionEmbedder(
            cfg.spectrum_dim, cfg.spectrum_embed_dim, cfg.material_embed_dim
        )
        self.time_mlp = nn.Sequential(
            nn.Linear(cfg.time_dim, cd), nn.SiLU(), nn.Linear(cd, cd)
        )
        in_ch = cfg.in_channels
        if cfg.conditioning == INPUT_CONCAT_CONDITIONING:
            self.cond_to_input = nn.Linear(cd, cfg.cond_input_channels)
            in_ch += cfg.cond_input_channels
        self.in_conv = nn.Conv2d(in_ch, w, 3, padding=1)
        self.enc1 = nn.ModuleList([FiLMResBlock(w, w, cd), FiLMResBlock(w, w, cd)])
        self.down1 = nn.Conv2d(w, 2 * w, 3, stride=2, padding=1)
        self.enc2 = nn.ModuleList(
            [FiLMResBlock(2 * w, 2 * w, cd), FiLMResBlock(2 * w, 2 * w, cd)]
        )
        self.down2 = nn.Conv2d(2 * w, 4 * w, 3, stride=2, padding=1)
        self.enc3 = nn.ModuleList(
            [FiLMResBlock(4 * w, 4 * w, cd), FiLMResBlock(4 * w, 4 * w, cd)]
        )
        self.dec3 = nn.ModuleList(
            [FiLMResBlock(4 * w, 4 * w, cd), FiLMResBlock(4 * w, 4 * w, cd)]
        )
        self.up2 = _Upsample(4 * w, 2 * w)
        self.dec2 = nn.ModuleList(
            [FiLMResBlock(4 * w, 2 * w, cd), FiLMResBlock(2 * w, 2 * w, cd)]
        )
        self.up1 = _Upsample(2 * w, w)
        self.dec1 = nn.ModuleList(
            [FiLMResBlock(2 * w, w, cd), FiLMResBlock(w, w, cd)]
        )
        self.out_norm = nn.GroupNorm(_norm_groups(w), w)
        self.out_conv = nn.Conv2d(w, cfg.in_channels, 3, padding=1)
        self.act = nn.SiLU()

    def forward(
        self,
        x_t: torch.Tensor,
        t: torch.Tensor,
        spectra: torch.Tensor,
        materials: torch.Tensor,
        null_mask: torch.Tensor | None = None,
    ) -> torch.Tensor:
        if x_t.ndim != 4 or x_t.shape[1] != self.config.in_channels:
            raise ValueError(f"expected (B,{self.config.in_channels},H,W), got {tuple(x_t.shape)}")
        if not torch.all((t >= 1)):
            raise ValueError("timesteps are 1-indexed; got t < 1")
        c = self.embedder(spectra, materials, null_mask)
        temb = self.time_mlp(
            sinusoidal_time_embedding(t.to(x_t.dtype), self.config.time_dim)
        )
        if self.config.conditioning == FILM_CONDITIONING:
            ctx = c + temb
            h = x_t
        else:
            ctx = temb
            planes = self.cond_to_input(c)[:, :, None, None]
            planes = planes.expand(-1, -1, x_t.shape[2], x_t.shape[3])
            h = torch.cat([x_t, planes], dim=1)
        h = self.in_conv(h)
        for block in self.enc1:
            h = block(h, ctx)
        s1 = h
        h = self.down1(h)
        for block in self.enc2:
            h = block(h, ctx)
        s2 = h
        h = self.down2(h)
        for block in self.enc3:
            h = block(h, ctx)
        for block in self.dec3:
            h = block(h, ctx)
        h = self.up2(h)
        h = torch.cat([h, s2], dim=1)
        for block in self.dec2:
            h = block(h, ctx)
        h = self.up1(h)
        h = torch.cat([h, s1], dim=1)
        for block in self.dec1:
            h = block(h, ctx)
        return self.out_conv(self.act(self.out_norm(h)))


@dataclass
class SurrogateConfig:
    widths: tuple[int, int, int, int] = (16, 32, 64, 64)
    material_embed_dim: int = MATERIAL_EMBED_DIM
    head_hidden: int = 256
    out_dim: int = SPECTRUM_DIM
    pool: int = 4
    in_channels: int = 3


class SpectrumSurrogate(nn.Module):
    """Predicts the 201-point |S11| spectrum from an encoded design.

    Small conv encoder with 3 stride-2 stages, pooled and flattened, joined
    with a material embedding and mapped through a 2-layer head; a sigmoid
    keeps outputs in [0, 1].
    """

    def __init__(self, config: SurrogateConfig | None = None):
        super().__init__()
        cfg = config or SurrogateConfig()
        self.config = cfg
        w0, w1, w2, w3 = cfg.widths
        self.encoder = nn.Sequential(
            nn.Conv2d(cfg.in_channels, w0, 3, padding=1),
            nn.SiLU(),
            nn.Conv2d(w0, w1, 3, stride=2, padding=1),
            nn.SiLU(),
            nn.Conv2d(w1, w2, 3, stride=2, padding=1),
            nn.SiLU(),
            nn.Conv2d(w2, w3, 3, stride=2, padding=1),
            nn.SiLU(),
            nn.AdaptiveAvgPool2d(cfg.pool),
        )
        self.material_net = nn.Sequential(
            nn.Linear(3, cfg.material_embed_dim),
            nn.SiLU(),
            nn.Linear(cfg.material_embed_dim, cfg.material_embed_dim),
        )
        flat = w3 * cfg.pool * cfg.pool
        self.head = nn.Sequential(
            nn.Linear(flat + cfg.material_embed_dim, cfg.head_hidden),
            nn.SiLU(),
            nn.Linear(cfg.head_hidden, cfg.out_dim),
        )

    def forward(self, images: torch.Tensor, materials: torch.Tensor) -> torch.Tensor:
        if images.ndim != 4 or images.shape[1] != self.config.in_channels:
            raise ValueError(f"expected (B,{self.config.in_channels},H,W) images")
        feat = self.encoder(images).flatten(1)
        mat = self.material_net(standardize_material(materials))
        return torch.sigmoid(self.head(torch.cat([feat, mat], dim=-1)))


def lr_at(epoch: int, total_epochs: int, lr0: float = 1e-4) -> float:
    """Cosine annealing from lr0 at epoch 0 to 0 at total_epochs."""
    if not 0 <= epoch <= total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {total_epochs}]")
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * epoch / total_epochs))


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------


@dataclass
class TensorGradReport:
    name: str
    max_rel_err: float
    n_checked: int


@dataclass
class GradientCheckReport:
    block: str
    tolerance: float
    entries: list[TensorGradReport] = field(default_factory=list)

    @property
    def max_rel_err(self) -> float:
        return max((e.max_rel_err for e in self.entries), default=0.0)

    @property
    def worst(self) -> TensorGradReport | None:
        return max(self.entries, key=lambda e: e.max_rel_err, default=None)

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tolerance


def gradient_check(
    fn,
    inputs: tuple[torch.Tensor, ...],
    params: list[tuple[str, torch.Tensor]] | None = None,
    tolerance: float = 1e-4,
    h_rel: float = 1e-6,
    block_name: str = "block",
    max_per_tensor: int | None = None,
    probe_seed: int = 0,
) -> GradientCheckReport:
    """Compare analytic gradients against central finite differences.

    Runs in double precision. A fixed random projection of the output is
    the scalar probe loss; every element of every differentiable input and
    parameter is perturbed by +-h (h = h_rel * max(1, |x|)) unless
    max_per_tensor caps the element count. Relative error uses a 1e-3
    denominator floor so near-zero gradients are compared at the scale of
    the finite-difference noise.
    """
    def _prep(x: torch.Tensor) -> torch.Tensor:
        if x.is_floating_point():
            return x.detach().double().clone().requires_grad_(True)
        return x.detach().clone()

    inputs = tuple(_prep(x) for x in inputs)
    named = [(f"input[{i}]", x) for i, x in enumerate(inputs) if x.requires_grad]
    if params is not None:
        named += [(name, p) for name, p in params]

    gen = torch.Generator().manual_seed(probe_seed)

    def run() -> torch.Tensor:
        return fn(*inputs)

    out = run()
    proj = torch.randn(out.shape, generator=gen, dtype=torch.float64) / math.sqrt(
        out.numel()
    )

    def loss_value() -> float:
        with torch.no_grad():
            return float((run() * proj).sum())

    loss = (out * proj).sum()
    grads = torch.autograd.grad(loss, [t for _, t in named], allow_unused=True)

    report = GradientCheckReport(block=block_name, tolerance=tolerance)
    for (name, tensor), grad in zip(named, grads):
        analytic = (
            torch.zeros_like(tensor) if grad is None else grad
        ).reshape(-1)
        flat = tensor.reshape(-1)
        n = flat.numel()
        if max_per_tensor is not None and n > max_per_tensor:
            idx_gen = torch.Generator().manual_seed(probe_seed + 1)
            indices = torch.randperm(n, generator=idx_gen)[:max_per_tensor].tolist()
        else:
            indices = range(n)
        worst = 0.0
        checked = 0
        for i in indices:
            x0 = float(flat[i].detach())
            h = h_rel * max(1.0, abs(x0))
            with torch.no_grad():
                flat[i] = x0 + h
                f_plus = loss_value()
                flat[i] = x0 - h
                f_minus = loss_value()
                flat[i] = x0
            numeric = (f_plus - f_minus) / (2.0 * h)
            a = float(analytic[i])
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-3)
            worst = max(worst, rel)
            checked += 1
        report.entries.append(TensorGradReport(name, worst, checked))
    return report


def gradient_check_module(
    module: nn.Module,
    inputs: tuple[torch.Tensor, ...],
    tolerance: float = 1e-4,
    block_name: str | None = None,
    max_per_tensor: int | None = None,
) -> GradientCheckReport:
    """gradient_check over a module's forward, covering all its parameters."""
    mod = copy.deepcopy(module).double()
    mod.eval()
    params = [(n, p) for n, p in mod.named_parameters()]
    return gradient_check(
        mod,
        inputs,
        params=params,
        tolerance=tolerance,
        block_name=block_name or type(module).__name__,
        max_per_tensor=max_per_tensor,
    )


# ---------------------------------------------------------------------------
# Checkpoint format
# ---------------------------------------------------------------------------


def save_checkpoint(path, module: nn.Module, kind: str, config: dict) -> None:
    """Versioned header (schema, kind, config, shape table) + float32 arrays."""
    state = module.state_dict()
    names = list(state.keys())
    header = {
        "schema": CHECKPOINT_SCHEMA,
        "kind": kind,
        "config": config,
        "arrays": [[n, list(state[n].shape)] for n in names],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for n in names:
            fh.write(state[n].detach().cpu().numpy().astype("<f4").tobytes())


@dataclass
class Checkpoint:
    kind: str
    config: dict
    arrays: dict[str, np.ndarray]


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if not raw.startswith(CHECKPOINT_MAGIC):
        raise ValueError(f"{path}: not a rasgen checkpoint")
    off = len(CHECKPOINT_MAGIC)
    (hlen,) = struct.unpack_from("<Q", raw, off)
    off += 8
    header = json.loads(raw[off : off + hlen].decode("utf-8"))
    if header["schema"] != CHECKPOINT_SCHEMA:
        raise ValueError(f"unsupported checkpoint schema {header['schema']}")
    off += hlen
    arrays = {}
    for name, shape in header["arrays"]:
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=off)
        arrays[name] = arr.reshape(shape).copy()
        off += count * 4
    if off != len(raw):
        raise ValueError(f"{path}: trailing bytes after arrays")
    return Checkpoint(kind=header["kind"], config=header["config"], arrays=arrays)


def apply_checkpoint(module: nn.Module, ckpt: Checkpoint) -> None:
    """Load arrays into the module, validating the shape table exactly."""
    state = module.state_dict()
    expected = {n: tuple(t.shape) for n, t in state.items()}
    got = {n: tuple(a.shape) for n, a in ckpt.arrays.items()}
    if expected != got:
        missing = sorted(set(expected) - set(got))
        extra = sorted(set(got) - set(expected))
        wrong = sorted(
            n for n in set(expected) & set(got) if expected[n] != got[n]
        )
        raise ValueError(
            f"checkpoint shape table mismatch: missing={missing}, "
            f"extra={extra}, wrong_shape={wrong}"
        )
    module.load_state_dict(
        {n: torch.from_numpy(a).to(state[n].dtype) for n, a in ckpt.arrays.items()}
    )


def make_denoiser(config: dict | None = None) -> DenoiserUNet:
    cfg = DenoiserConfig(**(config or {}))
    cfg_dict = dict(cfg.__dict__)
    net = DenoiserUNet(cfg)
    net._config_dict = cfg_dict
    return net


def make_surrogate(config: dict | None = None) -> SpectrumSurrogate:
    cfg_kwargs = dict(config or {})
    if "widths" in cfg_kwargs:
        cfg_kwargs["widths"] = tuple(cfg_kwargs["widths"])
    cfg = SurrogateConfig(**cfg_kwargs)
    return SpectrumSurrogate(cfg)
