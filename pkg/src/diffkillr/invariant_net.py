"""DiffeoInvariantNet: an autoencoder whose latent space ignores realistic diffeomorphisms.

Training jointly minimizes a reconstruction loss and an NT-Xent contrastive
loss whose positives are a patch and a fresh random warp of the same patch.
Matching looks up the nearest augmented bank record in latent space.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Union

import numpy as np
import torch
from torch import nn

from .diffeo_gen import AugmentationConfig, make_warp, sample_diffeo, warp_array
from .errors import ConfigError, DimensionError, FormatError, NumericError, ParameterError, TrainingError
from .nn_ops import deterministic, patches_to_tensor, seed_everything
from .patch_bank import CellBank, CellPatch
from .rng import substream, substream_seed
from .sampling import HardExampleSampler

logger = logging.getLogger(__name__)


# --------------------------------------------------------------------------
# Losses
# --------------------------------------------------------------------------


def nt_xent_loss(
    embeddings: torch.Tensor,
    temperature: float = 0.5,
    positives: Optional[Sequence[int]] = None,
    reduction: str = "mean",
) -> torch.Tensor:
    """Normalized temperature-scaled cross entropy over ``2N`` embeddings.

    By default rows ``k`` and ``k + N`` form the positive pairs; ``positives``
    may instead give the partner index of every row.  Every other row acts as
    a negative.  ``reduction="none"`` returns the per-anchor losses.
    """
    z = torch.as_tensor(embeddings)
    if z.ndim != 2 or z.shape[0] < 2 or z.shape[0] % 2:
        raise ParameterError(f"need 2N >= 2 embeddings arranged in pairs, got shape {tuple(z.shape)}")
    if temperature <= 0:
        raise ParameterError("temperature must be positive")
    norms = z.norm(dim=1, keepdim=True)
    if bool((norms < 1e-12).any()):
        raise NumericError("zero-norm embedding in contrastive loss")
    two_n = z.shape[0]
    if positives is None:
        half = two_n // 2
        positives = [(k + half) % two_n for k in range(two_n)]
    pos = torch.as_tensor(list(positives), dtype=torch.long)
    u = z / norms
    logits = (u @ u.T) / temperature
    logits = logits.masked_fill(torch.eye(two_n, dtype=torch.bool), float("-inf"))
    per_anchor = -(logits[torch.arange(two_n), pos] - torch.logsumexp(logits, dim=1))
    if reduction == "none":
        return per_anchor
    return per_anchor.mean()


def reconstruction_loss(inputs: torch.Tensor, reconstructions: torch.Tensor) -> torch.Tensor:
    """Mean over the batch of the summed squared pixel error."""
    x, y = torch.as_tensor(inputs), torch.as_tensor(reconstructions)
    if x.shape != y.shape:
        raise DimensionError(f"shape mismatch: {tuple(x.shape)} vs {tuple(y.shape)}")
    return ((x - y) ** 2).reshape(x.shape[0], -1).sum(dim=1).mean()


# --------------------------------------------------------------------------
# Model
# --------------------------------------------------------------------------


class AutoEncoder(nn.Module):
    """Strided-conv encoder to a ``dim``-vector and a mirrored transposed-conv decoder."""

    def __init__(self, channels: int = 1, size: int = 32, dim: int = 128, widths: Sequence[int] = (16, 32, 64)):
        super().__init__()
        if size % (2 ** len(widths)):
            raise ParameterError(f"patch size {size} must be divisible by {2 ** len(widths)}")
        self.channels, self.size, self.dim, self.widths = channels, size, dim, tuple(widths)
        act = lambda: nn.LeakyReLU(0.2)  # noqa: E731
        enc: List[nn.Module] = [nn.Conv2d(channels, widths[0], 3, padding=1), act()]
        prev = widths[0]
        for w in widths:
            enc += [nn.Conv2d(prev, w, 4, stride=2, padding=1), act()]
            prev = w
        self.encoder = nn.Sequential(*enc, nn.Flatten())
        self.bottom = size // 2 ** len(widths)
        flat = widths[-1] * self.bottom ** 2
        self.to_latent = nn.Linear(flat, dim)
        self.from_latent = nn.Linear(dim, flat)
        dec: List[nn.Module] = []
        rev = list(widths[::-1]) + [widths[0]]
        for a, b in zip(rev[:-1], rev[1:]):
            dec += [nn.ConvTranspose2d(a, b, 4, stride=2, padding=1), act()]
        self.decoder = nn.Sequential(*dec, nn.Conv2d(widths[0], channels, 3, padding=1), nn.Sigmoid())

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        return self.to_latent(self.encoder(x))

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        h = self.from_latent(z).view(-1, self.widths[-1], self.bottom, self.bottom)
        return self.decoder(h)

    def forward(self, x):
        z = self.encode(x)
        return z, self.decode(z)


@dataclass
class InvariantTrainConfig:
    temperature: float = 0.5
    batch_size: int = 8
    epochs: int = 200
    steps_per_epoch: int = 8
    learning_rate: float = 1e-3
    contrastive_weight: float = 1.0
    embedding_dim: int = 128
    widths: Sequence[int] = (16, 32, 64)
    hard_mining_ratio: float = 0.0
    seed: int = 0
    augmentation: AugmentationConfig = field(default_factory=AugmentationConfig)

    def __post_init__(self):
        if self.temperature <= 0:
            raise ConfigError("temperature must be positive")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 for the contrastive term")
        if isinstance(self.augmentation, dict):
            self.augmentation = AugmentationConfig.from_dict(self.augmentation)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        d["augmentation"] = self.augmentation.to_dict()
        return d


class EncoderModel:
    """A trained (or freshly initialized) autoencoder plus its provenance.

    Embeddings are L2-normalized by default, i.e. they live on the sphere on
    which the contrastive loss is defined.
    """

    def __init__(self, net: AutoEncoder, fingerprint: Optional[dict] = None, normalize: bool = True):
        self.net = net.eval()
        self.fingerprint = dict(fingerprint or {})
        self.normalize = normalize

    @property
    def architecture(self) -> dict:
        n = self.net
        return {"channels": n.channels, "size": n.size, "dim": n.dim, "widths": list(n.widths)}

    @property
    def loss_history(self) -> List[float]:
        return list(self.fingerprint.get("loss_history", []))

    def _check(self, arr: np.ndarray) -> None:
        want = (self.net.size, self.net.size, self.net.channels)
        if arr.shape[1:] != want:
            raise DimensionError(f"encoder expects patches of shape {want}, got {arr.shape[1:]}")

    @torch.no_grad()
    def encode(self, patches) -> np.ndarray:
        """Embed a batch of patches or ``(H, W, C)`` arrays; returns ``(B, D)`` float32."""
        arrs = [p.intensities if isinstance(p, CellPatch) else np.asarray(p) for p in patches]
        if not arrs:
            return np.zeros((0, self.net.dim), np.float32)
        arr = np.stack([a if a.ndim == 3 else a[..., None] for a in arrs]).astype(np.float32)
        self._check(arr)
        out = []
        with deterministic():
            for k in range(0, len(arr), 256):
                z = self.net.encode(patches_to_tensor(arr[k:k + 256]).float())
                out.append(z.double())
        z = torch.cat(out)
        norms = z.norm(dim=1, keepdim=True)
        if bool((norms < 1e-12).any()):
            raise NumericError("encoder produced a zero-norm embedding")
        if self.normalize:
            z = z / norms
        return z.float().numpy()

    @torch.no_grad()
    def reconstruct(self, patches) -> np.ndarray:
        arr = np.stack([p.intensities if isinstance(p, CellPatch) else np.asarray(p) for p in patches])
        _, rec = self.net(patches_to_tensor(arr))
        return rec.numpy().transpose(0, 2, 3, 1)

    def torch_encoder(self):
        """Differentiable map from a ``(B, C, H, W)`` tensor to embeddings."""
        def f(x):
            z = self.net.encode(x)
            return z / z.norm(dim=1, keepdim=True) if self.normalize else z
        return f

    def save(self, path: Union[str, Path]) -> None:
        path = Path(path)
        torch.save(self.net.state_dict(), path)
        meta = {"kind": "invariant", "architecture": self.architecture, "normalize": self.normalize,
                "fingerprint": self.fingerprint}
        path.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True))

    @classmethod
    def load(cls, path: Union[str, Path]) -> "EncoderModel":
        path = Path(path)
        try:
            meta = json.loads(path.with_suffix(".json").read_text())
            if meta.get("kind") != "invariant":
                raise FormatError(f"{path} is not an invariant-net checkpoint")
            net = AutoEncoder(**meta["architecture"])
            net.load_state_dict(torch.load(path, weights_only=True))
        except (KeyError, json.JSONDecodeError, RuntimeError) as exc:
            raise FormatError(f"cannot load checkpoint {path}: {exc}") from None
        return cls(net, meta.get("fingerprint"), meta.get("normalize", True))

    def digest(self) -> str:
        h = hashlib.sha256()
        for k, v in self.net.state_dict().items():
            h.update(k.encode())
            h.update(v.detach().numpy().tobytes())
        return h.hexdigest()[:16]


def init_encoder(channels: int = 1, size: int = 32, dim: int = 128, widths=(16, 32, 64), seed: int = 0) -> EncoderModel:
    torch.manual_seed(substream_seed(seed, "invariant-init"))
    return EncoderModel(AutoEncoder(channels, size, dim, widths), {"seed": seed, "epochs": 0, "loss_history": []})


# --------------------------------------------------------------------------
# Training
# --------------------------------------------------------------------------


def _augment(arr: np.ndarray, rng: np.random.Generator, config: AugmentationConfig) -> np.ndarray:
    spec = sample_diffeo(rng, config, size=arr.shape[0])
    return warp_array(make_warp(spec, arr.shape[0], arr.shape[1]), arr).astype(np.float32)


def _training_items(bank: CellBank):
    """(class id, patch array) pairs; background patches share one extra class."""
    items = [(r.entry, r.patch.intensities) for r in bank.records()]
    items += [(bank.n, p.intensities) for p in bank.background]
    return items


def train_invariant(bank: CellBank, cfg: InvariantTrainConfig = None) -> EncoderModel:
    """Fit the autoencoder on ``bank`` with reconstruction + weighted NT-Xent loss."""
    cfg = cfg or InvariantTrainConfig()
    if bank.n < 2:
        raise ConfigError("invariant training needs at least two archetypes")
    items = _training_items(bank)
    n_classes = bank.n + (1 if bank.background else 0)
    size, channels = bank.patch_size, bank.entries[0].patch.intensities.shape[2]
    model = init_encoder(channels, size, cfg.embedding_dim, cfg.widths, cfg.seed)
    net = model.net.train()
    seed_everything(substream_seed(cfg.seed, "invariant-torch"))
    rng = substream(cfg.seed, "invariant-augment")
    sampler = HardExampleSampler(len(items), cfg.hard_mining_ratio, 4 * cfg.batch_size,
                                 seed=substream_seed(cfg.seed, "invariant-sampler"))
    opt = torch.optim.Adam(net.parameters(), lr=cfg.learning_rate)
    history = []
    per_batch = min(cfg.batch_size, n_classes)
    with deterministic():
        for epoch in range(cfg.epochs):
            total = 0.0
            for _ in range(cfg.steps_per_epoch):
                chosen, seen = [], set()
                for k in sampler.sample():
                    cls = items[k][0]
                    if cls not in seen:
                        seen.add(cls)
                        chosen.append(int(k))
                    if len(chosen) == per_batch:
                        break
                if len(chosen) < 2:
                    continue
                views_a = [items[k][1] for k in chosen]
                views_b = [_augment(items[k][1], rng, cfg.augmentation) for k in chosen]
                x = patches_to_tensor(views_a + views_b)
                z, rec = net(x)
                per_anchor = nt_xent_loss(z, cfg.temperature, reduction="none")
                loss = reconstruction_loss(x, rec) + cfg.contrastive_weight * per_anchor.mean()
                if not torch.isfinite(loss):
                    raise TrainingError("invariant-net loss is not finite", epoch=epoch)
                opt.zero_grad()
                loss.backward()
                opt.step()
                half = len(chosen)
                sampler.update(chosen, (per_anchor[:half] + per_anchor[half:]).detach().numpy() / 2)
                total += loss.item()
            history.append(total / cfg.steps_per_epoch)
            if epoch % 50 == 0:
                logger.debug("invariant epoch %d loss %.4f", epoch, history[-1])
    model.net.eval()
    model.fingerprint = {"seed": cfg.seed, "epochs": cfg.epochs, "loss_history": history, "config": cfg.to_dict()}
    return model


# --------------------------------------------------------------------------
# Embedding and matching
# --------------------------------------------------------------------------


def embed(model: EncoderModel, patch: CellPatch) -> np.ndarray:
    return model.encode([patch])[0]


def embed_bank(model: EncoderModel, bank: CellBank) -> CellBank:
    """Return a copy of ``bank`` with record and background embeddings cached."""
    rec = model.encode([r.patch for r in bank.records()])
    bg = model.encode(bank.background) if bank.background else None
    if not bank.augmented:
        return bank.with_embeddings(np.zeros((0, model.net.dim)), bg)
    return bank.with_embeddings(rec, bg)


def _bank_embeddings(model: EncoderModel, bank: CellBank) -> np.ndarray:
    if bank.embeddings is not None and len(bank.embeddings) == len(bank.records()):
        return bank.embeddings
    return model.encode([r.patch for r in bank.records()])


@dataclass(frozen=True)
class MatchResult:
    """Nearest bank record: augmentation ``i`` of archetype ``j``."""

    i: int
    j: int
    cosine_distance: float
    l2_distance: float
    record: int = 0


def match_embedding(query: np.ndarray, bank_embeddings: np.ndarray, bank: CellBank, top_k: int = 1) -> List[MatchResult]:
    """Rank bank records by latent L2 distance to ``query`` (stable, so ties keep (j, i) order)."""
    if len(bank_embeddings) == 0:
        raise ParameterError("cannot match against an empty bank")
    q = np.asarray(query, np.float64)
    e = np.asarray(bank_embeddings, np.float64)
    d = np.linalg.norm(e - q, axis=1)
    cos = 1.0 - (e @ q) / np.maximum(np.linalg.norm(e, axis=1) * np.linalg.norm(q), 1e-12)
    order = np.argsort(d, kind="stable")[:top_k]
    records = bank.records()
    return [
        MatchResult(records[k].index, records[k].entry, float(np.clip(cos[k], 0.0, 2.0)), float(d[k]), int(k))
        for k in order
    ]


def match(model: EncoderModel, query: CellPatch, bank: CellBank, top_k: Optional[int] = None):
    """Nearest augmented record to ``query``; a list of the ``top_k`` nearest when given."""
    if not bank.entries:
        raise ParameterError("cannot match against an empty bank")
    res = match_embedding(embed(model, query), _bank_embeddings(model, bank), bank, top_k or 1)
    return res if top_k else res[0]


# --------------------------------------------------------------------------
# Embedding quality
# --------------------------------------------------------------------------


def _average_precision(relevant: np.ndarray, k: Optional[int]) -> float:
    total = int(relevant.sum())
    if k is not None:
        relevant = relevant[:k]
        total = min(total, k)
    if total == 0:
        return 0.0
    hits = np.cumsum(relevant)
    ranks = np.arange(1, len(relevant) + 1)
    return float(np.sum((hits / ranks)[relevant]) / total)


def map_metric(embeddings: np.ndarray, labels: Sequence, k: Optional[Union[int, Sequence[int]]] = None):
    """Mean average precision of same-label retrieval, each point querying all others.

    ``k`` truncates rankings (AP@k); a sequence of sizes returns a dict.
    """
    e = np.asarray(embeddings, np.float64)
    y = np.asarray(labels)
    if len(np.unique(y)) < 2:
        warnings.warn("map_metric with a single class is degenerate; returning 1", RuntimeWarning, stacklevel=2)
        return 1.0 if k is None or np.isscalar(k) else {int(kk): 1.0 for kk in k}
    if k is not None and not np.isscalar(k):
        return {int(kk): map_metric(e, y, int(kk)) for kk in k}
    d = np.linalg.norm(e[:, None, :] - e[None, :, :], axis=-1)
    aps = []
    for q in range(len(e)):
        order = np.argsort(d[q], kind="stable")
        order = order[order != q]
        aps.append(_average_precision(y[order] == y[q], k))
    return float(np.mean(aps))


def knn_accuracy(query_emb, query_labels, ref_emb, ref_labels, k: int = 1) -> float:
    """Fraction of queries whose ``k`` nearest references vote (majority) for the right label."""
    q, r = np.asarray(query_emb, np.float64), np.asarray(ref_emb, np.float64)
    ql, rl = np.asarray(query_labels), np.asarray(ref_labels)
    if not 1 <= k <= len(r):
        raise ParameterError(f"k={k} must lie in [1, {len(r)}] (reference set size)")
    d = np.linalg.norm(q[:, None, :] - r[None, :, :], axis=-1)
    correct = 0
    for row, truth in zip(d, ql):
        nearest = rl[np.argsort(row, kind="stable")[:k]]
        values, counts = np.unique(nearest, return_counts=True)
        # Ties go to the label of the closest neighbour among the tied ones.
        best = values[counts == counts.max()]
        vote = next(v for v in nearest if v in best)
        correct += vote == truth
    return correct / len(ql)
