"""Planted-structure synthetic corpora for desk-scale experiments.

Items live on a category tree of a given branching factor and depth. Content
vectors are leaf centroids plus isotropic noise, collaborative vectors carry a
low-rank block signal keyed to the top-level category, and user sequences are
random walks with a strong same-leaf transition bias, so the hierarchy is
recoverable by a well-behaved tokenizer.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .corpus import Interaction, InteractionCorpus, k_core_filter
from .features import FeatureSet, ItemFeatures, build_tag_vocab, normalize_tag_path


@dataclass
class SynthSpec:
    """Generation knobs beyond the headline sizes."""

    d_content: int = 64
    d_collab: int = 16
    content_scale: float = 4.0      # level-1 centroid spread
    level_decay: float = 0.45       # centroid offset shrink per extra depth
    noise_scale: float = 0.25       # per-item isotropic content noise
    collab_noise: float = 0.3
    transition_bias: float = 0.9    # probability the walk stays in the current leaf
    min_seq_len: int = 8
    max_seq_len: int = 16
    max_len: int = 20
    k_core: int = 5
    start_time: int = 1_500_000_000
    step_seconds: int = 3600


def _category_paths(n_categories: int, depth: int) -> list[tuple[int, ...]]:
    paths: list[tuple[int, ...]] = [()]
    for _ in range(depth):
        paths = [p + (c,) for p in paths for c in range(n_categories)]
    return paths


def _tag_name(prefix: tuple[int, ...]) -> str:
    return "cat" + "".join(f"-{c}" for c in prefix)


def synth_generate(
    seed: int,
    n_users: int,
    n_items: int,
    n_categories: int,
    depth: int,
    spec: SynthSpec | None = None,
) -> tuple[InteractionCorpus, FeatureSet]:
    """Deterministically generate a corpus plus features for the given seed."""
    spec = spec or SynthSpec()
    n_leaves = n_categories ** depth
    if n_categories < 1 or depth < 1 or n_users < 1:
        raise ValueError("n_categories, depth and n_users must be positive")
    if n_items < n_leaves:
        raise ValueError(
            f"infeasible sizes: {n_items} items cannot populate {n_leaves} leaf categories"
        )

    rng = np.random.default_rng(seed)

    # Hierarchical centroids: each node offsets its parent with shrinking scale.
    leaves = _category_paths(n_categories, depth)
    centroids: dict[tuple[int, ...], np.ndarray] = {(): np.zeros(spec.d_content)}
    frontier: list[tuple[int, ...]] = [()]
    for level in range(1, depth + 1):
        scale = spec.content_scale * spec.level_decay ** (level - 1)
        next_frontier = []
        for parent in frontier:
            for c in range(n_categories):
                node = parent + (c,)
                centroids[node] = centroids[parent] + scale * rng.standard_normal(spec.d_content)
                next_frontier.append(node)
        frontier = next_frontier

    item_ids = [f"i{n:05d}" for n in range(n_items)]
    item_leaf = {item: leaves[n % n_leaves] for n, item in enumerate(item_ids)}

    block_vectors = spec.content_scale * rng.standard_normal((n_categories, spec.d_collab))
    e_content: dict[str, np.ndarray] = {}
    e_collab: dict[str, np.ndarray] = {}
    for item in item_ids:
        leaf = item_leaf[item]
        e_content[item] = centroids[leaf] + spec.noise_scale * rng.standard_normal(spec.d_content)
        e_collab[item] = (
            block_vectors[leaf[0]] + spec.collab_noise * rng.standard_normal(spec.d_collab)
        )

    leaf_items = {leaf: [i for i in item_ids if item_leaf[i] == leaf] for leaf in leaves}

    interactions: list[Interaction] = []
    for u in range(n_users):
        user = f"u{u:05d}"
        home = leaves[u % n_leaves]
        length = int(rng.integers(spec.min_seq_len, spec.max_seq_len + 1))
        leaf = home
        t = spec.start_time + int(rng.integers(0, spec.step_seconds))
        for _ in range(length):
            pool = leaf_items[leaf]
            item = pool[int(rng.integers(len(pool)))]
            interactions.append(Interaction(user, item, t))
            t += spec.step_seconds + int(rng.integers(0, spec.step_seconds))
            if rng.random() >= spec.transition_bias:
                leaf = leaves[int(rng.integers(n_leaves))]

    corpus = k_core_filter(interactions, spec.k_core, max_len=spec.max_len)

    tag_paths = {
        item: normalize_tag_path(
            [_tag_name(item_leaf[item][: d + 1]) for d in range(depth)], depth
        )
        for item in corpus.items
    }
    vocab = build_tag_vocab(tag_paths, depth)

    tag_embeddings: dict[str, np.ndarray] = {}
    for item in corpus.items:
        leaf = item_leaf[item]
        for d, tag in enumerate(tag_paths[item]):
            tag_embeddings.setdefault(tag, centroids[leaf[: d + 1]].astype(np.float32))

    counts = {item: 0 for item in corpus.items}
    for split in corpus.splits.values():
        for item in split.train:
            counts[item] += 1
    values = list(counts.values())
    lo, hi = min(values), max(values)
    span = (hi - lo) or 1

    items = {
        item: ItemFeatures(
            e_content=e_content[item].astype(np.float32),
            e_collab=e_collab[item].astype(np.float32),
            tags=tag_paths[item],
            popularity_raw=counts[item],
            popularity=(counts[item] - lo) / span if hi != lo else 0.0,
        )
        for item in corpus.items
    }
    features = FeatureSet(
        items=items,
        tag_embeddings=tag_embeddings,
        tag_vocab=vocab,
        d_content=spec.d_content,
        d_collab=spec.d_collab,
    )
    return corpus, features
