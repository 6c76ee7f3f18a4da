"""DiffeoMappingNet: predict paired forward/inverse warps between a cell and its archetype.

Four small architectures share one interface.  ``velocity`` predicts a
stationary velocity field and integrates ``+v``/``-v`` by scaling and
squaring, so its two fields are inverse by construction; the others emit
both fields from one network with two output heads.

``oracle_register`` is an independent, learning-free registration by direct
minimization, used to check the learned model.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage, optimize
from torch import nn

from . import nn_ops
from .diffeo_gen import AugmentationConfig, InterpPolicy, WarpField, invert, make_warp, sample_diffeo, warp_array
from .errors import ConfigError, DimensionError, FormatError, TrainingError
from .patch_bank import CellBank, CellPatch, LabelStack
from .rng import substream, substream_seed
from .sampling import HardExampleSampler

logger = logging.getLogger(__name__)

ARCHITECTURES = ("encoder_decoder", "displacement", "velocity", "correlation")


def registration_augmentation(patch_size: int = 32) -> AugmentationConfig:
    """Residual deformations a matched pair still differs by: moderate rotations and stretches."""
    return AugmentationConfig(angle_range=(-np.pi / 6, np.pi / 6), stretch_range=(0.8, 1.25), patch_size=patch_size)


# --------------------------------------------------------------------------
# Loss
# --------------------------------------------------------------------------


def mapping_loss(fixed: torch.Tensor, moving: torch.Tensor, forward: torch.Tensor, inverse: torch.Tensor,
                 reduction: str = "sum") -> torch.Tensor:
    """Alignment plus cycle-consistency loss.

    ``||x - W o m||^2 + ||m - W_inv o (W o m)||^2`` for images ``(B, C, H, W)``
    and fields ``(B, 2, H, W)``; ``reduction="mean"`` divides by the pixel count.
    """
    if fixed.shape != moving.shape:
        raise DimensionError(f"image shapes differ: {tuple(fixed.shape)} vs {tuple(moving.shape)}")
    want = (fixed.shape[0], 2) + tuple(fixed.shape[2:])
    if tuple(forward.shape) != want or tuple(inverse.shape) != want:
        raise DimensionError(f"fields must have shape {want}")
    registered = nn_ops.warp(moving, forward)
    cycled = nn_ops.warp(registered, inverse)
    total = ((fixed - registered) ** 2).sum() + ((moving - cycled) ** 2).sum()
    if reduction == "mean":
        return total / fixed.numel()
    return total


# --------------------------------------------------------------------------
# Networks
# --------------------------------------------------------------------------


def _block(cin, cout, stride=1):
    return nn.Sequential(nn.Conv2d(cin, cout, 3, stride=stride, padding=1), nn.LeakyReLU(0.2))


class UNet(nn.Module):
    """Small 2-D U-Net; ``skips=False`` makes it a plain encoder-decoder."""

    def __init__(self, cin: int, cout: int, widths=(16, 32, 32, 32), skips: bool = True):
        super().__init__()
        self.skips = skips
        self.inc = _block(cin, widths[0])
        self.down = nn.ModuleList(_block(a, b, stride=2) for a, b in zip(widths[:-1], widths[1:]))
        ups = []
        rev = widths[::-1]
        for a, b in zip(rev[:-1], rev[1:]):
            ups.append(_block(a + (b if skips else 0), b))
        self.up = nn.ModuleList(ups)
        self.head = nn.Conv2d(widths[0], cout, 3, padding=1)
        nn.init.normal_(self.head.weight, std=1e-5)
        nn.init.zeros_(self.head.bias)

    def forward(self, x):
        feats = [self.inc(x)]
        for d in self.down:
            feats.append(d(feats[-1]))
        h = feats.pop()
        for u in self.up:
            skip = feats.pop()
            h = F.interpolate(h, size=skip.shape[2:], mode="bilinear", align_corners=False)
            h = u(torch.cat([h, skip], 1) if self.skips else h)
        return self.head(h)


def _local_correlation(a: torch.Tensor, b: torch.Tensor, radius: int) -> torch.Tensor:
    """Cost volume of channel-mean products for displacements in ``[-radius, radius]^2``."""
    k = 2 * radius + 1
    padded = F.pad(b, (radius,) * 4)
    h, w = a.shape[2:]
    vols = [
        (a * padded[:, :, dy:dy + h, dx:dx + w]).mean(1, keepdim=True)
        for dy in range(k) for dx in range(k)
    ]
    return torch.cat(vols, 1)


class CorrelationNet(nn.Module):
    """Shared feature pyramid, local correlation at 1/2 and 1/4 scale, fused by a decoder."""

    def __init__(self, cin: int, cout: int, width: int = 16):
        super().__init__()
        self.f1 = nn.Sequential(_block(cin, width), _block(width, width, 2))
        self.f2 = _block(width, 2 * width, 2)
        c2, c4 = width + 49, 4 * width + 25  # cost volumes are (2r+1)^2 channels
        self.dec4 = _block(c4, 2 * width)
        self.dec2 = _block(c2 + 2 * width, 2 * width)
        self.dec1 = _block(2 * width + 2 * cin, width)
        self.head = nn.Conv2d(width, cout, 3, padding=1)
        nn.init.normal_(self.head.weight, std=1e-5)
        nn.init.zeros_(self.head.bias)
        self.cin = cin

    def forward(self, x):
        m, f = x[:, :self.cin], x[:, self.cin:]
        m2, f2 = self.f1(m), self.f1(f)
        m4, f4 = self.f2(m2), self.f2(f2)
        h4 = self.dec4(torch.cat([_local_correlation(f4, m4, 2), m4, f4], 1))
        h2 = F.interpolate(h4, size=m2.shape[2:], mode="bilinear", align_corners=False)
        h2 = self.dec2(torch.cat([_local_correlation(f2, m2, 3), m2, h2], 1))
        h1 = F.interpolate(h2, size=x.shape[2:], mode="bilinear", align_corners=False)
        return self.head(self.dec1(torch.cat([h1, x], 1)))


class WarpNet(nn.Module):
    """Maps ``(moving, fixed)`` to ``(forward, inverse)`` displacement fields in pixels."""

    def __init__(self, architecture: str = "velocity", channels: int = 1, integration_steps: int = 7):
        super().__init__()
        if architecture not in ARCHITECTURES:
            raise ConfigError(f"unknown mapper architecture {architecture!r}")
        self.architecture, self.channels, self.integration_steps = architecture, channels, integration_steps
        cout = 2 if architecture == "velocity" else 4
        if architecture == "correlation":
            self.body = CorrelationNet(channels, cout)
        else:
            self.body = UNet(2 * channels, cout, skips=architecture != "encoder_decoder")

    def forward(self, moving: torch.Tensor, fixed: torch.Tensor):
        out = self.body(torch.cat([moving, fixed], 1))
        if self.architecture == "velocity":
            return (nn_ops.integrate_velocity(out, self.integration_steps),
                    nn_ops.integrate_velocity(-out, self.integration_steps))
        return out[:, :2], out[:, 2:]


# --------------------------------------------------------------------------
# Model wrapper and results
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class RegistrationResult:
    """``forward`` warps the moving cell onto the fixed one; ``inverse`` maps back."""

    forward: WarpField
    inverse: WarpField
    alignment_residual: float
    cycle_residual: float
    converged: bool = True

    def to_dict(self) -> dict:
        return {"alignment_residual": self.alignment_residual, "cycle_residual": self.cycle_residual,
                "converged": self.converged}


def _gray(x) -> np.ndarray:
    a = x.intensities if isinstance(x, CellPatch) else np.asarray(x, float)
    return a.mean(axis=-1) if a.ndim == 3 else a


def _residuals(fixed: np.ndarray, moving: np.ndarray, fwd: WarpField, inv: WarpField) -> Tuple[float, float]:
    registered = warp_array(fwd, moving)
    cycled = warp_array(inv, registered)
    return float(np.mean((fixed - registered) ** 2)), float(np.mean((moving - cycled) ** 2))


class MapperModel:
    """A warp-predicting network plus its provenance."""

    def __init__(self, net: WarpNet, fingerprint: Optional[dict] = None):
        self.net = net.eval()
        self.fingerprint = dict(fingerprint or {})

    @property
    def architecture(self) -> str:
        return self.net.architecture

    @property
    def loss_history(self) -> List[float]:
        return list(self.fingerprint.get("loss_history", []))

    @torch.no_grad()
    def predict(self, fixed: Sequence, moving: Sequence) -> Tuple[np.ndarray, np.ndarray]:
        """Batched inference; returns forward and inverse fields as ``(B, H, W, 2)`` arrays."""
        def stack(xs):
            return nn_ops.patches_to_tensor([x.intensities if isinstance(x, CellPatch) else x for x in xs])

        f, m = stack(fixed), stack(moving)
        if f.shape != m.shape:
            raise DimensionError(f"fixed {tuple(f.shape)} and moving {tuple(m.shape)} differ")
        if f.shape[1] != self.net.channels:
            raise DimensionError(f"mapper expects {self.net.channels} channels, got {f.shape[1]}")
        with nn_ops.deterministic():
            fwd, inv = self.net(m, f)
        return nn_ops.tensor_to_fields(fwd), nn_ops.tensor_to_fields(inv)

    def save(self, path: Union[str, Path]) -> None:
        path = Path(path)
        torch.save(self.net.state_dict(), path)
        meta = {"kind": "mapping", "architecture": self.architecture, "channels": self.net.channels,
                "integration_steps": self.net.integration_steps, "fingerprint": self.fingerprint}
        path.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True))

    @classmethod
    def load(cls, path: Union[str, Path]) -> "MapperModel":
        path = Path(path)
        try:
            meta = json.loads(path.with_suffix(".json").read_text())
            if meta.get("kind") != "mapping":
                raise FormatError(f"{path} is not a mapping-net checkpoint")
            net = WarpNet(meta["architecture"], meta["channels"], meta["integration_steps"])
            net.load_state_dict(torch.load(path, weights_only=True))
        except (KeyError, json.JSONDecodeError, RuntimeError) as exc:
            raise FormatError(f"cannot load checkpoint {path}: {exc}") from None
        return cls(net, meta.get("fingerprint"))

    def digest(self) -> str:
        h = hashlib.sha256()
        for k, v in self.net.state_dict().items():
            h.update(k.encode())
            h.update(v.detach().numpy().tobytes())
        return h.hexdigest()[:16]


def init_mapper(architecture: str = "velocity", channels: int = 1, seed: int = 0, integration_steps: int = 7) -> MapperModel:
    torch.manual_seed(substream_seed(seed, "mapping-init"))
    return MapperModel(WarpNet(architecture, channels, integration_steps), {"seed": seed, "epochs": 0, "loss_history": []})


def register(model: MapperModel, fixed: CellPatch, moving: CellPatch) -> RegistrationResult:
    return register_many(model, [fixed], [moving])[0]


def register_many(model: MapperModel, fixed: Sequence[CellPatch], moving: Sequence[CellPatch]) -> List[RegistrationResult]:
    """One batched inference pass; residuals are mean squared intensity errors."""
    for f, m in zip(fixed, moving):
        if f.shape != m.shape:
            raise DimensionError(f"fixed {f.shape} and moving {m.shape} differ")
    fwd, inv = model.predict(fixed, moving)
    out = []
    for f, m, a, b in zip(fixed, moving, fwd, inv):
        wf, wi = WarpField(a), WarpField(b)
        align, cycle = _residuals(f.intensities, m.intensities, wf, wi)
        out.append(RegistrationResult(wf, wi, align, cycle))
    return out


def transfer_label(result: RegistrationResult, archetype_labels: LabelStack,
                   policy: Optional[InterpPolicy] = None) -> LabelStack:
    """Carry the archetype's labels onto the new cell through the inverse field."""
    if archetype_labels.shape is not None and tuple(archetype_labels.shape) != tuple(result.inverse.shape):
        raise DimensionError(f"labels {archetype_labels.shape} vs field {result.inverse.shape}")
    return archetype_labels.warped(result.inverse, policy or InterpPolicy.for_labels())


# --------------------------------------------------------------------------
# Training
# --------------------------------------------------------------------------


@dataclass
class MappingTrainConfig:
    architecture: str = "velocity"
    epochs: int = 60
    steps_per_epoch: int = 25
    batch_size: int = 16
    learning_rate: float = 2e-3
    pool_size: int = 1024
    smoothness_weight: float = 0.01
    regularizer: str = "diffusion"
    integration_steps: int = 7
    hard_mining_ratio: float = 0.0
    seed: int = 0
    augmentation: Optional[AugmentationConfig] = None

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise ConfigError(f"unknown mapper architecture {self.architecture!r}")
        if self.regularizer not in ("diffusion", "elastic"):
            raise ConfigError(f"unknown regularizer {self.regularizer!r}")
        if isinstance(self.augmentation, dict):
            self.augmentation = AugmentationConfig.from_dict(self.augmentation)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["augmentation"] = None if self.augmentation is None else self.augmentation.to_dict()
        return d


def training_pairs(bank: CellBank, count: int, config: AugmentationConfig, seed: int):
    """``count`` (fixed, moving) arrays: a bank record and a fresh warp of it."""
    records = bank.records()
    rng = substream(seed, "mapping-pairs")
    fixed, moving = [], []
    for _ in range(count):
        r = records[rng.integers(len(records))]
        size = r.patch.size
        spec = sample_diffeo(rng, config, size=size)
        fixed.append(r.patch.intensities)
        moving.append(warp_array(make_warp(spec, size, size), r.patch.intensities).astype(np.float32))
    return np.stack(fixed), np.stack(moving)


def train_mapping(bank: CellBank, cfg: MappingTrainConfig = None) -> MapperModel:
    """Self-supervised training on (bank record, warped bank record) pairs."""
    cfg = cfg or MappingTrainConfig()
    if not bank.entries:
        raise ConfigError("cannot train a mapper on an empty bank")
    aug = cfg.augmentation or registration_augmentation(bank.patch_size)
    fixed, moving = training_pairs(bank, cfg.pool_size, aug, cfg.seed)
    fixed_t, moving_t = nn_ops.patches_to_tensor(fixed), nn_ops.patches_to_tensor(moving)
    model = init_mapper(cfg.architecture, fixed_t.shape[1], cfg.seed, cfg.integration_steps)
    net = model.net.train()
    nn_ops.seed_everything(substream_seed(cfg.seed, "mapping-torch"))
    sampler = HardExampleSampler(cfg.pool_size, cfg.hard_mining_ratio, cfg.batch_size,
                                 seed=substream_seed(cfg.seed, "mapping-sampler"))
    opt = torch.optim.Adam(net.parameters(), lr=cfg.learning_rate)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, max(1, cfg.epochs * cfg.steps_per_epoch))
    history, cycle_history = [], []
    with nn_ops.deterministic():
        for epoch in range(cfg.epochs):
            total = cyc = 0.0
            for _ in range(cfg.steps_per_epoch):
                idx = torch.as_tensor(sampler.sample())
                f, m = fixed_t[idx], moving_t[idx]
                fwd, inv = net(m, f)
                registered = nn_ops.warp(m, fwd)
                cycled = nn_ops.warp(registered, inv)
                align_ps = ((f - registered) ** 2).flatten(1).mean(1)
                cycle_ps = ((m - cycled) ** 2).flatten(1).mean(1)
                loss = (align_ps + cycle_ps).mean()
                if cfg.smoothness_weight:
                    loss = loss + cfg.smoothness_weight * (nn_ops.smoothness(fwd, cfg.regularizer)
                                                   + nn_ops.smoothness(inv, cfg.regularizer))
                if not torch.isfinite(loss):
                    raise TrainingError("mapping-net loss is not finite", epoch=epoch)
                opt.zero_grad()
                loss.backward()
                opt.step()
                sched.step()
                sampler.update(idx.numpy(), (align_ps + cycle_ps).detach().numpy())
                total += loss.item()
                cyc += cycle_ps.mean().item()
            history.append(total / cfg.steps_per_epoch)
            cycle_history.append(cyc / cfg.steps_per_epoch)
            if epoch % 10 == 0:
                logger.debug("mapping epoch %d loss %.5f", epoch, history[-1])
    model.net.eval()
    model.fingerprint = {"seed": cfg.seed, "epochs": cfg.epochs, "loss_history": history,
                         "cycle_history": cycle_history, "config": cfg.to_dict()}
    return model


# --------------------------------------------------------------------------
# Direct-optimization oracle
# --------------------------------------------------------------------------


def _bilinear(img: np.ndarray, sx: np.ndarray, sy: np.ndarray):
    """Border-clamped bilinear samples of ``img`` and their exact x/y derivatives."""
    h, w = img.shape
    cx, cy = np.clip(sx, 0, w - 1), np.clip(sy, 0, h - 1)
    x0 = np.minimum(np.floor(cx).astype(int), w - 2)
    y0 = np.minimum(np.floor(cy).astype(int), h - 2)
    fx, fy = cx - x0, cy - y0
    i00, i01 = img[y0, x0], img[y0, x0 + 1]
    i10, i11 = img[y0 + 1, x0], img[y0 + 1, x0 + 1]
    val = (1 - fy) * ((1 - fx) * i00 + fx * i01) + fy * ((1 - fx) * i10 + fx * i11)
    gx = (1 - fy) * (i01 - i00) + fy * (i11 - i10)
    gy = (1 - fx) * (i10 - i00) + fx * (i11 - i01)
    # Clamped coordinates do not move the sample.
    gx = np.where((sx < 0) | (sx > w - 1), 0.0, gx)
    gy = np.where((sy < 0) | (sy > h - 1), 0.0, gy)
    return val, gx, gy


def _oracle_energy(flat, fixed, moving, beta, xs, ys):
    h, w = fixed.shape
    d = flat.reshape(h, w, 2)
    val, gx, gy = _bilinear(moving, xs + d[..., 0], ys + d[..., 1])
    r = fixed - val
    energy = np.sum(r * r)
    grad = np.stack([-2 * r * gx, -2 * r * gy], axis=-1)
    for axis in (0, 1):
        diff = np.diff(d, axis=axis)
        energy += beta * np.sum(diff * diff)
        g = np.zeros_like(d)
        sl_hi = [slice(None)] * 3
        sl_lo = [slice(None)] * 3
        sl_hi[axis], sl_lo[axis] = slice(1, None), slice(None, -1)
        g[tuple(sl_hi)] += 2 * beta * diff
        g[tuple(sl_lo)] -= 2 * beta * diff
        grad += g
    return energy, grad.ravel()


def oracle_register(fixed, moving, smoothness_weight: float = 0.03, iterations: int = 200,
                    sigmas: Sequence[float] = (2.0, 1.0, 0.0)) -> RegistrationResult:
    """Register by minimizing ``||x - W o m||^2 + beta ||grad W||^2`` over a free field.

    L-BFGS with exact bilinear gradients, run coarse-to-fine over Gaussian
    blurs ``sigmas``; the inverse comes from fixed-point inversion.  No learned
    parameters are involved.
    """
    x, m = _gray(fixed).astype(float), _gray(moving).astype(float)
    if x.shape != m.shape:
        raise DimensionError(f"fixed {x.shape} and moving {m.shape} differ")
    h, w = x.shape
    ys, xs = np.mgrid[0:h, 0:w].astype(float)
    d = np.zeros((h, w, 2))
    converged = True
    for sigma in sigmas:
        xf = ndimage.gaussian_filter(x, sigma) if sigma else x
        mf = ndimage.gaussian_filter(m, sigma) if sigma else m
        res = optimize.minimize(
            _oracle_energy, d.ravel(), args=(xf, mf, smoothness_weight, xs, ys), jac=True,
            method="L-BFGS-B", options={"maxiter": iterations},
        )
        if np.all(np.isfinite(res.x)) and res.fun <= _oracle_energy(d.ravel(), xf, mf, smoothness_weight, xs, ys)[0]:
            d = res.x.reshape(h, w, 2)
        else:
            converged = False
    fwd = WarpField(d)
    inv, info = invert(fwd, iterations=50, margin=2, full_output=True)
    fixed_a = fixed.intensities if isinstance(fixed, CellPatch) else np.asarray(fixed)
    moving_a = moving.intensities if isinstance(moving, CellPatch) else np.asarray(moving)
    align, cycle = _residuals(fixed_a, moving_a, fwd, inv)
    return RegistrationResult(fwd, inv, align, cycle, converged and info.converged)
