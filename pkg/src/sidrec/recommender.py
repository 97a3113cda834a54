"""Sequence-to-sequence SID generator with MoE feature fusion.

History items are expanded to L tokens each; every token embedding fuses the
discrete code row with projected continuous features through a noisy top-K
mixture of experts, feeding a Transformer encoder-decoder that emits the next
item's SID one level at a time. Generation is temperature-scaled by trie
branching density and regularized toward target code vectors and tags.
"""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .config import PipelineConfig
from .corpus import InteractionCorpus
from .features import FeatureSet
from .trie import SidTrie, TemperatureConfig, constrained_beam_search

log = logging.getLogger(__name__)

Sid = tuple[int, ...]


class NumericError(RuntimeError):
    """Training produced a non-finite loss."""


def time_bucket(delta_seconds: int, n_buckets: int = 32) -> int:
    """Logarithmic bucketing of time gaps; gap 0 (or the first item) is bucket 0."""
    if delta_seconds <= 0:
        return 0
    return min(n_buckets - 1, int(math.floor(math.log2(1 + delta_seconds))))


class EmbeddingTables(nn.Module):
    """Token rows plus sequence-position, depth, and time-gap encodings."""

    def __init__(self, cfg: PipelineConfig, dtype: torch.dtype = torch.float32):
        super().__init__()
        self.n_levels = cfg.n_levels
        self.codebook_size = cfg.codebook_size
        self.max_len = cfg.max_len
        self.n_time_buckets = cfg.n_time_buckets
        n_tokens = cfg.n_levels * cfg.codebook_size
        self.pad_id = n_tokens
        self.bos_id = n_tokens + 1
        self.token = nn.Embedding(n_tokens + 2, cfg.d_model, dtype=dtype)
        self.pos_seq = nn.Embedding(cfg.max_len, cfg.d_model, dtype=dtype)
        self.pos_depth = nn.Embedding(cfg.n_levels, cfg.d_model, dtype=dtype)
        self.pos_time = nn.Embedding(cfg.n_time_buckets, cfg.d_model, dtype=dtype)

    def token_id(self, code: Tensor, depth: int) -> Tensor:
        return code + depth * self.codebook_size


def embed_token(
    tables: EmbeddingTables, code: Tensor, item_pos: Tensor, depth: int, bucket: Tensor
) -> Tensor:
    """Sum the four table rows for history tokens of one depth."""
    if depth >= tables.n_levels:
        raise ValueError(f"depth {depth} out of range (n_levels={tables.n_levels})")
    if int(code.max()) >= tables.codebook_size or int(code.min()) < 0:
        raise ValueError("code index out of range")
    if int(item_pos.max()) >= tables.max_len:
        raise ValueError("item position exceeds max_len")
    if int(bucket.max()) >= tables.n_time_buckets:
        raise ValueError("time bucket out of range")
    depth_idx = torch.full_like(code, depth)
    return (
        tables.token(tables.token_id(code, depth))
        + tables.pos_seq(item_pos)
        + tables.pos_depth(depth_idx)
        + tables.pos_time(bucket)
    )


class FusionMoE(nn.Module):
    """Depth-aware projections plus a noisy top-K expert mixture."""

    def __init__(self, cfg: PipelineConfig, dtype: torch.dtype = torch.float32):
        super().__init__()
        self.cfg = cfg
        self.d_x = cfg.d_model + 2 * cfg.d_proj + cfg.code_dim
        self.proj_content = nn.ModuleList(
            nn.Sequential(
                nn.Linear(cfg.d_content, cfg.d_proj, dtype=dtype),
                nn.LayerNorm(cfg.d_proj, dtype=dtype),
            )
            for _ in range(cfg.n_levels)
        )
        self.proj_collab = nn.ModuleList(
            nn.Sequential(
                nn.Linear(cfg.d_collab, cfg.d_proj, dtype=dtype),
                nn.LayerNorm(cfg.d_proj, dtype=dtype),
            )
            for _ in range(cfg.n_levels)
        )
        self.gating = nn.Linear(self.d_x, cfg.n_experts, bias=False, dtype=dtype)
        self.experts = nn.ModuleList(
            nn.Sequential(
                nn.Linear(self.d_x, cfg.d_moe, dtype=dtype),
                nn.SiLU(),
                nn.Linear(cfg.d_moe, self.d_x, dtype=dtype),
            )
            for _ in range(cfg.n_experts)
        )
        self.proj_out = nn.Linear(self.d_x, cfg.d_model, dtype=dtype)
        self.eta = nn.Parameter(torch.tensor(cfg.eta_init, dtype=dtype))
        self.expert_eval_counts = [0] * cfg.n_experts

    def reset_counters(self) -> None:
        self.expert_eval_counts = [0] * self.cfg.n_experts


def compose_input(
    dsi: FusionMoE, depth: int, e_id: Tensor, e_content: Tensor, e_collab: Tensor, q: Tensor
) -> Tensor:
    """Concatenate the token embedding with normalized projections and the code."""
    if q.shape[-1] != dsi.cfg.code_dim:
        raise ValueError(f"code vector dim {q.shape[-1]} != configured {dsi.cfg.code_dim}")
    return torch.cat(
        [
            e_id,
            dsi.proj_content[depth](e_content),
            dsi.proj_collab[depth](e_collab),
            q,
        ],
        dim=-1,
    )


def moe_forward(
    dsi: FusionMoE, x: Tensor, training: bool, generator: torch.Generator | None = None
) -> Tensor:
    """Route each row through its top-K experts; weights renormalize over the K."""
    cfg = dsi.cfg
    if cfg.moe_top_k > cfg.n_experts:
        raise ValueError("top-K exceeds the number of experts")
    flat = x.reshape(-1, dsi.d_x)
    logits = dsi.gating(flat)
    if training:
        noise = torch.randn(logits.shape, generator=generator, dtype=logits.dtype)
        logits = logits + noise
    # Stable descending sort keeps the lower expert index first on ties.
    order = torch.argsort(-logits, dim=-1, stable=True)
    top = order[:, : cfg.moe_top_k]
    top_logits = logits.gather(1, top)
    weights = torch.softmax(top_logits, dim=-1)

    out = torch.zeros_like(flat)
    for expert_idx in range(cfg.n_experts):
        pick = (top == expert_idx).any(dim=-1)
        rows = pick.nonzero(as_tuple=True)[0]
        if rows.numel() == 0:
            continue
        dsi.expert_eval_counts[expert_idx] += int(rows.numel())
        expert_out = dsi.experts[expert_idx](flat[rows])
        w = torch.where(top[rows] == expert_idx, weights[rows], torch.zeros_like(weights[rows]))
        out[rows] = out[rows] + w.sum(dim=-1, keepdim=True) * expert_out
    return out.reshape(x.shape[:-1] + (dsi.d_x,))


def fuse(dsi: FusionMoE, e_id: Tensor, h_moe: Tensor) -> Tensor:
    """Residual injection of expert output into the token embedding."""
    return e_id + dsi.eta * dsi.proj_out(h_moe)


class MultiHeadAttention(nn.Module):
    """Attention with an explicit per-head width (inner dim need not equal d_model)."""

    def __init__(self, d_model: int, n_heads: int, head_dim: int, dtype: torch.dtype):
        super().__init__()
        inner = n_heads * head_dim
        self.n_heads = n_heads
        self.head_dim = head_dim
        self.q = nn.Linear(d_model, inner, bias=False, dtype=dtype)
        self.k = nn.Linear(d_model, inner, bias=False, dtype=dtype)
        self.v = nn.Linear(d_model, inner, bias=False, dtype=dtype)
        self.out = nn.Linear(inner, d_model, bias=False, dtype=dtype)

    def forward(
        self,
        query: Tensor,
        keyval: Tensor,
        attn_mask: Tensor | None = None,
        key_padding: Tensor | None = None,
    ) -> Tensor:
        b, tq, _ = query.shape
        tk = keyval.shape[1]
        shape = (b, -1, self.n_heads, self.head_dim)
        q = self.q(query).reshape(b, tq, self.n_heads, self.head_dim).transpose(1, 2)
        k = self.k(keyval).reshape(*shape).transpose(1, 2)
        v = self.v(keyval).reshape(*shape).transpose(1, 2)
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.head_dim)
        if attn_mask is not None:
            scores = scores + attn_mask
        if key_padding is not None:
            scores = scores.masked_fill(~key_padding[:, None, None, :], float("-inf"))
        attn = torch.softmax(scores, dim=-1)
        mixed = (attn @ v).transpose(1, 2).reshape(b, tq, -1)
        return self.out(mixed)


def _ffn(d_model: int, d_ff: int, dtype: torch.dtype) -> nn.Sequential:
    return nn.Sequential(
        nn.Linear(d_model, d_ff, dtype=dtype),
        nn.SiLU(),
        nn.Linear(d_ff, d_model, dtype=dtype),
    )


class EncoderLayer(nn.Module):
    def __init__(self, cfg: PipelineConfig, dtype: torch.dtype):
        super().__init__()
        self.norm1 = nn.LayerNorm(cfg.d_model, dtype=dtype)
        self.attn = MultiHeadAttention(cfg.d_model, cfg.n_heads, cfg.head_dim, dtype)
        self.norm2 = nn.LayerNorm(cfg.d_model, dtype=dtype)
        self.ffn = _ffn(cfg.d_model, cfg.d_ff, dtype)

    def forward(self, x: Tensor, key_padding: Tensor | None) -> Tensor:
        h = self.norm1(x)
        x = x + self.attn(h, h, key_padding=key_padding)
        return x + self.ffn(self.norm2(x))


class DecoderLayer(nn.Module):
    def __init__(self, cfg: PipelineConfig, dtype: torch.dtype):
        super().__init__()
        self.norm1 = nn.LayerNorm(cfg.d_model, dtype=dtype)
        self.self_attn = MultiHeadAttention(cfg.d_model, cfg.n_heads, cfg.head_dim, dtype)
        self.norm2 = nn.LayerNorm(cfg.d_model, dtype=dtype)
        self.cross_attn = MultiHeadAttention(cfg.d_model, cfg.n_heads, cfg.head_dim, dtype)
        self.norm3 = nn.LayerNorm(cfg.d_model, dtype=dtype)
        self.ffn = _ffn(cfg.d_model, cfg.d_ff, dtype)

    def forward(
        self, x: Tensor, memory: Tensor, causal_mask: Tensor, mem_padding: Tensor | None
    ) -> Tensor:
        h = self.norm1(x)
        x = x + self.self_attn(h, h, attn_mask=causal_mask)
        x = x + self.cross_attn(self.norm2(x), memory, key_padding=mem_padding)
        return x + self.ffn(self.norm3(x))


class RecommenderModel(nn.Module):
    def __init__(
        self,
        cfg: PipelineConfig,
        codebooks: Tensor,            # frozen (L, K, code_dim)
        tag_vocab_sizes: list[int],
        dtype: torch.dtype = torch.float32,
    ):
        super().__init__()
        if codebooks.shape != (cfg.n_levels, cfg.codebook_size, cfg.code_dim):
            raise ValueError(f"codebook tensor has shape {tuple(codebooks.shape)}")
        self.cfg = cfg
        self.tables = EmbeddingTables(cfg, dtype=dtype)
        self.dsi = FusionMoE(cfg, dtype=dtype)
        self.encoder = nn.ModuleList(EncoderLayer(cfg, dtype) for _ in range(cfg.n_enc_layers))
        self.enc_norm = nn.LayerNorm(cfg.d_model, dtype=dtype)
        self.decoder = nn.ModuleList(DecoderLayer(cfg, dtype) for _ in range(cfg.n_dec_layers))
        self.dec_norm = nn.LayerNorm(cfg.d_model, dtype=dtype)
        self.reg_heads = nn.ModuleList(
            nn.Linear(cfg.d_model, cfg.code_dim, dtype=dtype) for _ in range(cfg.n_levels)
        )
        self.cls_heads = nn.ModuleList(
            nn.Linear(cfg.d_model, size, dtype=dtype) for size in tag_vocab_sizes
        )
        w = torch.empty(cfg.n_levels * cfg.codebook_size, cfg.d_model, dtype=dtype)
        nn.init.normal_(w, std=cfg.d_model**-0.5)
        self.w_out = nn.Parameter(w)
        self.register_buffer("codebooks", codebooks.detach().clone().to(dtype))

    # -- encoder side -----------------------------------------------------

    def embed_history(
        self, batch: "SeqBatch", training: bool, generator: torch.Generator | None = None
    ) -> tuple[Tensor, Tensor]:
        """Fused token embeddings for the history: (B, T*L, d_model) + key mask."""
        cfg = self.cfg
        b, t, _ = batch.hist_codes.shape
        per_depth = []
        for depth in range(cfg.n_levels):
            codes = batch.hist_codes[:, :, depth]
            e_id = embed_token(self.tables, codes, batch.hist_pos, depth, batch.hist_bucket)
            q = self.codebooks[depth][codes]
            x = compose_input(self.dsi, depth, e_id, batch.hist_content, batch.hist_collab, q)
            h = moe_forward(self.dsi, x, training=training, generator=generator)
            per_depth.append(fuse(self.dsi, e_id, h))
        stacked = torch.stack(per_depth, dim=2)           # (B, T, L, d)
        tokens = stacked.reshape(b, t * cfg.n_levels, cfg.d_model)
        mask = batch.hist_mask.repeat_interleave(cfg.n_levels, dim=1)
        memory = tokens
        for layer in self.encoder:
            memory = layer(memory, key_padding=mask)
        return self.enc_norm(memory), mask

    # -- decoder side -----------------------------------------------------

    def decode(self, memory: Tensor, mem_mask: Tensor | None, prefix_codes: Tensor) -> Tensor:
        """Decoder states after consuming BOS plus ``prefix_codes`` (B, P)."""
        b, plen = prefix_codes.shape
        ids = [torch.full((b, 1), self.tables.bos_id, dtype=torch.long)]
        for depth in range(plen):
            ids.append(self.tables.token_id(prefix_codes[:, depth : depth + 1], depth))
        token_ids = torch.cat(ids, dim=1)
        positions = torch.arange(plen + 1)
        x = self.tables.token(token_ids) + self.tables.pos_depth(positions)[None, :, :]
        causal = torch.triu(
            torch.full((plen + 1, plen + 1), float("-inf"), dtype=x.dtype), diagonal=1
        )
        for layer in self.decoder:
            x = layer(x, memory, causal_mask=causal, mem_padding=mem_mask)
        return self.dec_norm(x)

    def depth_logits(self, state: Tensor, depth: int) -> Tensor:
        k = self.cfg.codebook_size
        return state @ self.w_out[depth * k : (depth + 1) * k].t()


# -- batches ---------------------------------------------------------------


@dataclass
class SeqExample:
    user: str
    hist_items: list[str]
    hist_times: list[int]
    target_item: str


@dataclass
class SeqBatch:
    hist_codes: Tensor    # (B, T, L) long
    hist_pos: Tensor      # (B, T) long
    hist_bucket: Tensor   # (B, T) long
    hist_mask: Tensor     # (B, T) bool, True = real token
    hist_content: Tensor  # (B, T, d_content)
    hist_collab: Tensor   # (B, T, d_collab)
    target_codes: Tensor  # (B, L) long
    target_tags: Tensor   # (B, L) long
    target_tau: Tensor    # (B, L)


@dataclass
class ItemTensors:
    """Catalog-aligned static tensors for fast batch assembly."""

    items: list[str]
    index: dict[str, int]
    codes: Tensor     # (N, L) long
    content: Tensor   # (N, d_content)
    collab: Tensor    # (N, d_collab)
    tags: Tensor      # (N, L) long


def build_item_tensors(
    features: FeatureSet, sid_map: dict[str, Sid], n_levels: int,
    collab_override: dict[str, np.ndarray] | None = None,
) -> ItemTensors:
    items = sorted(sid_map)
    index = {item: i for i, item in enumerate(items)}
    collab_src = (
        [collab_override[i] for i in items]
        if collab_override is not None
        else [features.items[i].e_collab for i in items]
    )
    return ItemTensors(
        items=items,
        index=index,
        codes=torch.as_tensor(np.array([sid_map[i] for i in items], dtype=np.int64)),
        content=torch.as_tensor(np.stack([features.items[i].e_content for i in items])),
        collab=torch.as_tensor(np.stack(collab_src)),
        tags=torch.as_tensor(np.array([features.tag_index(i) for i in items], dtype=np.int64)),
    )


def training_examples(corpus: InteractionCorpus, min_hist: int = 1) -> list[SeqExample]:
    """Sliding next-item examples within each user's train split."""
    out = []
    for user in corpus.users:
        train = corpus.splits[user].train
        times = corpus.times[user]
        for j in range(min_hist, len(train)):
            out.append(
                SeqExample(
                    user=user,
                    hist_items=list(train[:j]),
                    hist_times=times[:j],
                    target_item=train[j],
                )
            )
    return out


def holdout_examples(corpus: InteractionCorpus, split: str) -> list[SeqExample]:
    if split not in ("valid", "test"):
        raise ValueError("split must be 'valid' or 'test'")
    out = []
    for user in corpus.users:
        s = corpus.splits[user]
        times = corpus.times[user]
        if split == "valid":
            hist, target = list(s.train), s.valid
        else:
            hist, target = list(s.train) + [s.valid], s.test
        out.append(SeqExample(user, hist, times[: len(hist)], target))
    return out


def _tau_for_target(trie: SidTrie, ats: TemperatureConfig, sid: Sid) -> list[float]:
    from .trie import adaptive_temperature

    return [
        adaptive_temperature(ats, trie.branching_factor(sid[:depth]))
        for depth in range(len(sid))
    ]


def build_batch(
    examples: list[SeqExample],
    tensors: ItemTensors,
    trie: SidTrie,
    ats: TemperatureConfig,
    n_time_buckets: int,
    dtype: torch.dtype = torch.float32,
) -> SeqBatch:
    b = len(examples)
    t = max(len(e.hist_items) for e in examples)
    n_levels = tensors.codes.shape[1]
    hist_idx = torch.zeros(b, t, dtype=torch.long)
    hist_pos = torch.zeros(b, t, dtype=torch.long)
    hist_bucket = torch.zeros(b, t, dtype=torch.long)
    hist_mask = torch.zeros(b, t, dtype=torch.bool)
    target_idx = torch.zeros(b, dtype=torch.long)
    target_tau = torch.zeros(b, n_levels, dtype=dtype)
    for row, ex in enumerate(examples):
        n = len(ex.hist_items)
        hist_idx[row, :n] = torch.as_tensor([tensors.index[i] for i in ex.hist_items])
        hist_pos[row, :n] = torch.arange(n)
        buckets = [0] + [
            time_bucket(ex.hist_times[j] - ex.hist_times[j - 1], n_time_buckets)
            for j in range(1, n)
        ]
        hist_bucket[row, :n] = torch.as_tensor(buckets)
        hist_mask[row, :n] = True
        target_idx[row] = tensors.index[ex.target_item]
        sid = tuple(int(c) for c in tensors.codes[target_idx[row]])
        target_tau[row] = torch.as_tensor(_tau_for_target(trie, ats, sid), dtype=dtype)
    return SeqBatch(
        hist_codes=tensors.codes[hist_idx],
        hist_pos=hist_pos,
        hist_bucket=hist_bucket,
        hist_mask=hist_mask,
        hist_content=tensors.content[hist_idx].to(dtype),
        hist_collab=tensors.collab[hist_idx].to(dtype),
        target_codes=tensors.codes[target_idx],
        target_tags=tensors.tags[target_idx],
        target_tau=target_tau,
    )


# -- losses ----------------------------------------------------------------


def structure_loss(model: RecommenderModel, states: Tensor, batch: SeqBatch) -> Tensor:
    """Regress target code vectors and classify target tags from decoder states."""
    total = torch.zeros((), dtype=states.dtype)
    for depth in range(model.cfg.n_levels):
        o = states[:, depth]
        target_vec = model.codebooks[depth][batch.target_codes[:, depth]]
        reg = (model.reg_heads[depth](o) - target_vec).pow(2).sum(dim=-1).mean()
        ce = F.cross_entropy(model.cls_heads[depth](o), batch.target_tags[:, depth])
        total = total + reg + ce
    return total


def gen_loss(model: RecommenderModel, states: Tensor, batch: SeqBatch) -> Tensor:
    """Temperature-scaled cross entropy over the full per-depth vocabulary."""
    total = torch.zeros((), dtype=states.dtype)
    for depth in range(model.cfg.n_levels):
        logits = model.depth_logits(states[:, depth], depth)
        scaled = logits / batch.target_tau[:, depth : depth + 1]
        total = total + F.cross_entropy(scaled, batch.target_codes[:, depth])
    return total


def recommender_loss(
    model: RecommenderModel,
    batch: SeqBatch,
    training: bool,
    generator: torch.Generator | None = None,
) -> tuple[Tensor, dict[str, float]]:
    memory, mem_mask = model.embed_history(batch, training=training, generator=generator)
    states = model.decode(memory, mem_mask, batch.target_codes[:, :-1])
    l_gen = gen_loss(model, states, batch)
    l_struct = structure_loss(model, states, batch)
    total = l_gen + model.cfg.structure_weight * l_struct
    parts = {
        "gen": float(l_gen.detach()),
        "structure": float(l_struct.detach()),
        "total": float(total.detach()),
    }
    return total, parts


# -- training and inference -------------------------------------------------


def _check_finite(parts: dict[str, float], epoch: int) -> None:
    for name, value in parts.items():
        if not np.isfinite(value):
            raise NumericError(f"non-finite loss term {name!r}={value} at epoch {epoch}")


def make_scorer(model: RecommenderModel, example: SeqExample, tensors: ItemTensors,
                trie: SidTrie, ats: TemperatureConfig):
    """Score prefixes against one user's encoded history (inference path)."""
    batch = build_batch([example], tensors, trie, ats, model.cfg.n_time_buckets)
    with torch.no_grad():
        memory, mem_mask = model.embed_history(batch, training=False)

    def scorer(prefixes: list[Sid]) -> np.ndarray:
        depth = len(prefixes[0])
        b = len(prefixes)
        mem = memory.expand(b, -1, -1)
        mask = mem_mask.expand(b, -1)
        if depth == 0:
            prefix_codes = torch.zeros(b, 0, dtype=torch.long)
        else:
            prefix_codes = torch.as_tensor(np.array(prefixes, dtype=np.int64))
        with torch.no_grad():
            states = model.decode(mem, mask, prefix_codes)
            logits = model.depth_logits(states[:, -1], depth)
        return logits.cpu().numpy()

    return scorer


def recommend(
    model: RecommenderModel,
    trie: SidTrie,
    tensors: ItemTensors,
    ats: TemperatureConfig,
    hist_items: list[str],
    hist_times: list[int],
    top_n: int,
    beam_width: int | None = None,
) -> list[tuple[str, float]]:
    """Rank the catalog for one user history via constrained beam search."""
    if not hist_items:
        raise ValueError("history is empty")
    width = beam_width or max(model.cfg.beam_width, top_n)
    example = SeqExample("", list(hist_items), list(hist_times), hist_items[-1])
    scorer = make_scorer(model, example, tensors, trie, ats)
    was_training = model.training
    model.eval()
    try:
        ranked = constrained_beam_search(scorer, trie, ats, width, top_n)
    finally:
        model.train(was_training)
    return ranked


def train_recommender(
    corpus: InteractionCorpus,
    features: FeatureSet,
    sid_map: dict[str, Sid],
    trie: SidTrie,
    cfg: PipelineConfig,
    epochs: int | None = None,
    collab_override: dict[str, np.ndarray] | None = None,
    codebooks: Tensor | None = None,
) -> tuple[RecommenderModel, list[dict[str, float]]]:
    """Teacher-forced training with per-epoch validation; keeps the best epoch."""
    from .eval import evaluate  # local import to avoid a module cycle

    features = features.normalized(cfg.n_levels)
    epochs = cfg.recommender_epochs if epochs is None else epochs
    torch.manual_seed(cfg.seed + 1)
    noise_gen = torch.Generator().manual_seed(cfg.seed + 2)

    if codebooks is None:
        raise ValueError("frozen quantizer codebooks are required")
    tensors = build_item_tensors(features, sid_map, cfg.n_levels, collab_override)
    vocab_sizes = [len(v) for v in features.tag_vocab]
    model = RecommenderModel(cfg, codebooks, vocab_sizes)
    ats = TemperatureConfig(
        tau_min=cfg.tau_min, tau_max=cfg.tau_max, alpha=cfg.tau_alpha,
        n_ref=cfg.resolve_n_ref(len(sid_map)),
    )

    examples = training_examples(corpus)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    history: list[dict[str, float]] = []
    best_state = copy.deepcopy(model.state_dict())
    best_key = (-math.inf, -math.inf)
    for epoch in range(epochs):
        model.train()
        perm = torch.randperm(len(examples))
        sums: dict[str, float] = {}
        n_batches = 0
        for start in range(0, len(examples), cfg.batch_size):
            chunk = [examples[i] for i in perm[start : start + cfg.batch_size]]
            batch = build_batch(chunk, tensors, trie, ats, cfg.n_time_buckets)
            total, parts = recommender_loss(model, batch, training=True, generator=noise_gen)
            _check_finite(parts, epoch)
            opt.zero_grad()
            total.backward()
            opt.step()
            for key, value in parts.items():
                sums[key] = sums.get(key, 0.0) + value
            n_batches += 1
        means = {key: value / n_batches for key, value in sums.items()}

        model.eval()
        report = evaluate(
            model, trie, corpus, features, "valid", cfg,
            tensors=tensors, ats=ats, user_limit=cfg.valid_user_limit,
        )
        means["valid_recall@10"] = report.recall[10]
        means["valid_ndcg@10"] = report.ndcg[10]
        history.append(means)
        log.info("recommender epoch %d: %s", epoch, {k: round(v, 5) for k, v in means.items()})
        key = (report.recall[10], -means["total"])
        if key > best_key:
            best_key = key
            best_state = copy.deepcopy(model.state_dict())

    model.load_state_dict(best_state)
    model.eval()
    return model, history
