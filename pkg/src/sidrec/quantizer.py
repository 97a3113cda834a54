"""Residual quantizer with gated collaborative denoising and tag anchoring.

The tokenizer maps each item's (content, collaborative) feature pair to an
L-tuple of code indices. Collaborative features pass through a learned
element-wise gate supervised toward item popularity; the fused latent is
residually quantized against L codebooks that update via exponential moving
averages while every other parameter trains by gradient descent.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from sklearn.cluster import kmeans_plusplus
from torch import Tensor, nn

from .config import PipelineConfig
from .corpus import InteractionCorpus
from .features import FeatureSet

log = logging.getLogger(__name__)


class NumericError(RuntimeError):
    """Training produced a non-finite loss."""


def _mlp(dims: tuple[int, ...], dtype: torch.dtype) -> nn.Sequential:
    layers: list[nn.Module] = []
    for i in range(len(dims) - 1):
        layers.append(nn.Linear(dims[i], dims[i + 1], dtype=dtype))
        if i < len(dims) - 2:
            layers.append(nn.SiLU())
    return nn.Sequential(*layers)


class CollabGate(nn.Module):
    """One-hidden-layer perceptron emitting a sigmoid gate over collab features."""

    def __init__(self, d_collab: int, dtype: torch.dtype = torch.float32):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(d_collab, d_collab, dtype=dtype),
            nn.SiLU(),
            nn.Linear(d_collab, d_collab, dtype=dtype),
        )

    def forward(self, e_collab: Tensor) -> Tensor:
        return torch.sigmoid(self.net(e_collab))


@dataclass
class QuantizationResult:
    """Per-level assignments for a batch of latents.

    ``residuals[0]`` is the input latent; ``residuals[l+1] = residuals[l] - codes[l]``.
    Residuals stay attached to the autograd graph; codes are codebook constants.
    """

    indices: Tensor     # (B, L) long
    codes: Tensor       # (L, B, d)
    z_q: Tensor         # (B, d)
    residuals: Tensor   # (L+1, B, d)


class CodebookStack(nn.Module):
    """L codebooks of K vectors each, updated by exponential moving averages."""

    def __init__(
        self,
        n_levels: int,
        codebook_size: int,
        code_dim: int,
        ema_decay: float = 0.99,
        ema_eps: float = 1e-5,
        dtype: torch.dtype = torch.float32,
    ):
        super().__init__()
        self.n_levels = n_levels
        self.codebook_size = codebook_size
        self.code_dim = code_dim
        self.ema_decay = ema_decay
        self.ema_eps = ema_eps
        self.register_buffer("codes", torch.zeros(n_levels, codebook_size, code_dim, dtype=dtype))
        self.register_buffer("ema_counts", torch.ones(n_levels, codebook_size, dtype=dtype))
        self.register_buffer("ema_sums", torch.zeros(n_levels, codebook_size, code_dim, dtype=dtype))

    @torch.no_grad()
    def init_from_latents(self, latents: np.ndarray, seed: int) -> None:
        """Seed each level with k-means++ centers over that level's residuals."""
        residual = np.asarray(latents, dtype=np.float64)
        k = self.codebook_size
        for level in range(self.n_levels):
            points = residual
            if points.shape[0] < k:
                rng = np.random.default_rng(seed + level)
                reps = -(-k // points.shape[0])
                tiled = np.tile(points, (reps, 1))[:k]
                points = tiled + 1e-3 * rng.standard_normal(tiled.shape)
            centers, _ = kmeans_plusplus(points, n_clusters=k, random_state=seed + level)
            level_codes = torch.as_tensor(centers, dtype=self.codes.dtype)
            self.codes[level] = level_codes
            self.ema_counts[level].fill_(1.0)
            self.ema_sums[level] = level_codes.clone()
            # Residuals for the next level under nearest-neighbor assignment.
            dist = ((residual[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
            chosen = centers[dist.argmin(axis=1)]
            residual = residual - chosen

    def _nearest(self, residual: Tensor, table: Tensor) -> Tensor:
        # Explicit (r - e)^2 distances, chunked: bit-identical to enumeration,
        # so ties resolve to the lowest index exactly as a brute-force scan would.
        out = []
        chunk = max(1, 8_000_000 // (table.shape[0] * table.shape[1]))
        for start in range(0, residual.shape[0], chunk):
            block = residual[start : start + chunk]
            dist = (block[:, None, :] - table[None, :, :]).pow(2).sum(dim=-1)
            out.append(dist.argmin(dim=1))
        return torch.cat(out)

    def quantize(self, z: Tensor) -> QuantizationResult:
        if z.shape[-1] != self.code_dim:
            raise ValueError(f"latent dim {z.shape[-1]} != code dim {self.code_dim}")
        residual = z
        residuals = [residual]
        indices, codes = [], []
        for level in range(self.n_levels):
            table = self.codes[level]
            idx = self._nearest(residual.detach(), table)
            chosen = table[idx]
            indices.append(idx)
            codes.append(chosen)
            residual = residual - chosen
            residuals.append(residual)
        stacked = torch.stack(codes, dim=0)
        return QuantizationResult(
            indices=torch.stack(indices, dim=1),
            codes=stacked,
            z_q=stacked.sum(dim=0),
            residuals=torch.stack(residuals, dim=0),
        )

    @torch.no_grad()
    def ema_update(self, result: QuantizationResult, decay: float | None = None) -> None:
        """Fold one batch of assignments into the running cluster statistics."""
        rho = self.ema_decay if decay is None else decay
        for level in range(self.n_levels):
            idx = result.indices[:, level]
            inputs = result.residuals[level].detach().to(self.codes.dtype)
            onehot = F.one_hot(idx, self.codebook_size).to(self.codes.dtype)
            batch_counts = onehot.sum(dim=0)
            batch_sums = onehot.t() @ inputs
            self.ema_counts[level].mul_(rho).add_(batch_counts, alpha=1.0 - rho)
            self.ema_sums[level].mul_(rho).add_(batch_sums, alpha=1.0 - rho)
            denom = self.ema_counts[level].clamp(min=self.ema_eps)
            self.codes[level] = self.ema_sums[level] / denom[:, None]


class QuantizerModel(nn.Module):
    def __init__(
        self,
        cfg: PipelineConfig,
        tag_vocab_sizes: list[int],
        dtype: torch.dtype = torch.float32,
    ):
        super().__init__()
        if len(tag_vocab_sizes) != cfg.n_levels:
            raise ValueError("need one tag vocabulary per SID level")
        self.cfg = cfg
        d_in = cfg.d_content + cfg.d_collab
        hidden = tuple(cfg.enc_hidden)
        self.gate = CollabGate(cfg.d_collab, dtype=dtype)
        self.encoder = _mlp((d_in, *hidden, cfg.code_dim), dtype)
        self.dec_content = _mlp((cfg.code_dim, *reversed(hidden), cfg.d_content), dtype)
        self.dec_collab = _mlp((cfg.code_dim, *reversed(hidden), cfg.d_collab), dtype)
        self.anchor_proj = nn.Linear(cfg.d_content, cfg.code_dim, dtype=dtype)
        self.classifiers = nn.ModuleList(
            nn.Linear(cfg.code_dim * (level + 1), size, dtype=dtype)
            for level, size in enumerate(tag_vocab_sizes)
        )
        self.codebooks = CodebookStack(
            cfg.n_levels, cfg.codebook_size, cfg.code_dim,
            ema_decay=cfg.ema_decay, ema_eps=cfg.ema_eps, dtype=dtype,
        )


@dataclass
class QuantizerBatch:
    e_content: Tensor    # (B, d_content)
    e_collab: Tensor     # (B, d_collab)
    popularity: Tensor   # (B,)
    tag_indices: Tensor  # (B, L) long
    tag_content: Tensor  # (B, L, d_content)


def compute_gate(model: QuantizerModel, e_collab: Tensor) -> Tensor:
    if e_collab.shape[-1] != model.cfg.d_collab:
        raise ValueError(f"collab dim {e_collab.shape[-1]} != configured {model.cfg.d_collab}")
    return model.gate(e_collab)


def gate_loss(g: Tensor, popularity: Tensor, margin: float) -> Tensor:
    """Pull the mean gate toward popularity while keeping element variance alive."""
    mean = g.mean(dim=-1)
    var = g.var(dim=-1, unbiased=False)
    per_item = (mean - popularity) ** 2 + F.relu(margin - var)
    return per_item.mean()


def purify(g: Tensor, e_collab: Tensor) -> Tensor:
    if g.shape != e_collab.shape:
        raise ValueError(f"gate shape {tuple(g.shape)} != collab shape {tuple(e_collab.shape)}")
    return g * e_collab


def encode(model: QuantizerModel, e_content: Tensor, collab_purified: Tensor) -> Tensor:
    if e_content.shape[-1] != model.cfg.d_content:
        raise ValueError(f"content dim {e_content.shape[-1]} != configured {model.cfg.d_content}")
    return model.encoder(torch.cat([e_content, collab_purified], dim=-1))


def residual_quantize(codebooks: CodebookStack, z: Tensor) -> QuantizationResult:
    return codebooks.quantize(z)


def soft_prototype(codes: Tensor, anchors: Tensor, temp: float) -> tuple[Tensor, Tensor]:
    """Proximity-weighted blend of one level's codes around each anchor.

    Returns (prototype, weights); weights sum to 1 over the codebook axis.
    """
    if temp <= 0:
        raise ValueError("prototype temperature must be positive")
    diff = anchors.unsqueeze(-2) - codes          # (..., K, d)
    sq = diff.pow(2).sum(dim=-1)
    weights = torch.softmax(-sq / temp, dim=-1)
    return weights @ codes, weights


def _ste_codes(quant: QuantizationResult) -> list[Tensor]:
    """Per-level code vectors that behave as residuals on the backward pass."""
    out = []
    for level in range(quant.codes.shape[0]):
        r = quant.residuals[level]
        q = quant.codes[level]
        out.append(r + (q - r).detach())
    return out


def anchor_loss(
    model: QuantizerModel,
    quant: QuantizationResult,
    tag_indices: Tensor,
    tag_content: Tensor,
) -> Tensor:
    """Per-level anchor alignment plus prefix-code tag classification."""
    cfg = model.cfg
    total = torch.zeros((), dtype=quant.residuals.dtype)
    ste = _ste_codes(quant)
    for level in range(cfg.n_levels):
        vocab = model.classifiers[level].out_features
        labels = tag_indices[:, level]
        if int(labels.max()) >= vocab:
            raise ValueError(f"tag index {int(labels.max())} out of vocabulary (size {vocab}) at level {level + 1}")
        anchors = model.anchor_proj(tag_content[:, level])
        proto, _ = soft_prototype(model.codebooks.codes[level].detach(), anchors, cfg.anchor_temp)
        align = (anchors - proto).pow(2).sum(dim=-1).mean()
        prefix = torch.cat(ste[: level + 1], dim=-1)
        ce = F.cross_entropy(model.classifiers[level](prefix), labels)
        total = total + align + ce
    return total


def recon_loss(model: QuantizerModel, e_content: Tensor, collab_purified: Tensor, z_q: Tensor) -> Tensor:
    """Twin squared-error reconstruction through the two task decoders."""
    err_content = (e_content - model.dec_content(z_q)).pow(2).sum(dim=-1)
    err_collab = (collab_purified - model.dec_collab(z_q)).pow(2).sum(dim=-1)
    return (err_content + err_collab).mean()


def commit_loss(z: Tensor, z_q: Tensor) -> Tensor:
    """Pull encoder outputs toward the (gradient-stopped) quantized latents."""
    return (z - z_q.detach()).pow(2).sum(dim=-1).mean()


def quantizer_loss(
    model: QuantizerModel, batch: QuantizerBatch
) -> tuple[Tensor, dict[str, float], QuantizationResult]:
    """Full tokenizer objective; returns (total, per-term breakdown, assignments)."""
    cfg = model.cfg
    g = compute_gate(model, batch.e_collab)
    l_gate = gate_loss(g, batch.popularity, cfg.gate_margin)
    collab_purified = purify(g, batch.e_collab)
    z = encode(model, batch.e_content, collab_purified)
    quant = residual_quantize(model.codebooks, z)
    z_q_ste = z + (quant.z_q - z).detach()
    l_recon = recon_loss(model, batch.e_content, collab_purified, z_q_ste)
    l_commit = commit_loss(z, quant.z_q)
    if cfg.anchor_weight > 0:
        l_anchor = anchor_loss(model, quant, batch.tag_indices, batch.tag_content)
    else:
        l_anchor = torch.zeros((), dtype=z.dtype)
    total = l_recon + cfg.commit_weight * l_commit + cfg.gate_weight * l_gate + cfg.anchor_weight * l_anchor
    parts = {
        "recon": float(l_recon.detach()),
        "commit": float(l_commit.detach()),
        "gate": float(l_gate.detach()),
        "anchor": float(l_anchor.detach()),
        "total": float(total.detach()),
    }
    return total, parts, quant


def ema_update(codebooks: CodebookStack, result: QuantizationResult, decay: float | None = None) -> None:
    codebooks.ema_update(result, decay=decay)


def _check_finite(parts: dict[str, float], epoch: int) -> None:
    for name, value in parts.items():
        if not np.isfinite(value):
            raise NumericError(f"non-finite loss term {name!r}={value} at epoch {epoch}")


def build_item_arrays(
    corpus: InteractionCorpus, features: FeatureSet, n_levels: int
) -> tuple[list[str], QuantizerBatch]:
    """Stack per-item tensors in catalog order for full-batch passes."""
    features = features.normalized(n_levels)
    items = list(corpus.items)
    feats = [features.items[i] for i in items]
    batch = QuantizerBatch(
        e_content=torch.as_tensor(np.stack([f.e_content for f in feats])),
        e_collab=torch.as_tensor(np.stack([f.e_collab for f in feats])),
        popularity=torch.as_tensor(np.array([f.popularity for f in feats], dtype=np.float32)),
        tag_indices=torch.as_tensor(
            np.array([features.tag_index(i) for i in items], dtype=np.int64)
        ),
        tag_content=torch.as_tensor(np.stack([features.tag_content(i) for i in items])),
    )
    return items, batch


def _slice(batch: QuantizerBatch, sel: Tensor) -> QuantizerBatch:
    return QuantizerBatch(
        e_content=batch.e_content[sel],
        e_collab=batch.e_collab[sel],
        popularity=batch.popularity[sel],
        tag_indices=batch.tag_indices[sel],
        tag_content=batch.tag_content[sel],
    )


def assign_sids(model: QuantizerModel, items: list[str], batch: QuantizerBatch) -> dict[str, tuple[int, ...]]:
    with torch.no_grad():
        g = compute_gate(model, batch.e_collab)
        z = encode(model, batch.e_content, purify(g, batch.e_collab))
        quant = residual_quantize(model.codebooks, z)
    rows = quant.indices.cpu().numpy()
    return {item: tuple(int(c) for c in rows[n]) for n, item in enumerate(items)}


def item_latents(model: QuantizerModel, items: list[str], batch: QuantizerBatch) -> dict[str, np.ndarray]:
    with torch.no_grad():
        g = compute_gate(model, batch.e_collab)
        z = encode(model, batch.e_content, purify(g, batch.e_collab))
    arr = z.cpu().numpy()
    return {item: arr[n].copy() for n, item in enumerate(items)}


def train_quantizer(
    corpus: InteractionCorpus,
    features: FeatureSet,
    cfg: PipelineConfig,
    epochs: int | None = None,
) -> tuple[QuantizerModel, dict[str, tuple[int, ...]], list[dict[str, float]]]:
    """Train the tokenizer and return (model, raw SID map, per-epoch loss log)."""
    features = features.normalized(cfg.n_levels)
    if features.d_content != cfg.d_content or features.d_collab != cfg.d_collab:
        raise ValueError(
            f"feature dims ({features.d_content}, {features.d_collab}) do not match "
            f"config ({cfg.d_content}, {cfg.d_collab})"
        )
    epochs = cfg.quantizer_epochs if epochs is None else epochs
    torch.manual_seed(cfg.seed)
    items, full = build_item_arrays(corpus, features, cfg.n_levels)
    vocab_sizes = [len(v) for v in features.tag_vocab]
    model = QuantizerModel(cfg, vocab_sizes)

    with torch.no_grad():
        g = compute_gate(model, full.e_collab)
        z0 = encode(model, full.e_content, purify(g, full.e_collab))
    model.codebooks.init_from_latents(z0.numpy(), seed=cfg.seed)

    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    n = len(items)
    history: list[dict[str, float]] = []
    for epoch in range(epochs):
        perm = torch.randperm(n)
        sums: dict[str, float] = {}
        n_batches = 0
        for start in range(0, n, cfg.batch_size):
            sel = perm[start : start + cfg.batch_size]
            total, parts, quant = quantizer_loss(model, _slice(full, sel))
            _check_finite(parts, epoch)
            opt.zero_grad()
            total.backward()
            opt.step()
            model.codebooks.ema_update(quant)
            for key, value in parts.items():
                sums[key] = sums.get(key, 0.0) + value
            n_batches += 1
        means = {key: value / n_batches for key, value in sums.items()}
        history.append(means)
        log.info("tokenizer epoch %d: %s", epoch, {k: round(v, 5) for k, v in means.items()})

    return model, assign_sids(model, items, full), history
