"""Leave-one-out ranking metrics and popularity-group breakdowns."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import PipelineConfig
from .corpus import InteractionCorpus
from .features import FeatureSet
from .trie import SidTrie, TemperatureConfig

GROUP_NAMES = ("long_tail", "medium", "popular")


def recall_at_k(ranked: list[str], target: str, k: int) -> float:
    if k < 1:
        raise ValueError("k must be >= 1")
    return 1.0 if target in ranked[:k] else 0.0


def ndcg_at_k(ranked: list[str], target: str, k: int) -> float:
    """Single relevant item, so the ideal DCG is 1 and NDCG = 1/log2(rank+1)."""
    if k < 1:
        raise ValueError("k must be >= 1")
    top = ranked[:k]
    if target not in top:
        return 0.0
    rank = top.index(target) + 1
    return 1.0 / math.log2(rank + 1)


@dataclass
class GroupMetrics:
    n_users: int
    recall: dict[int, float] | None
    ndcg: dict[int, float] | None


@dataclass
class MetricsReport:
    recall: dict[int, float]
    ndcg: dict[int, float]
    n_users: int
    groups: dict[str, GroupMetrics] | None = None

    def to_dict(self) -> dict:
        out = {
            "n_users": self.n_users,
            "recall": {str(k): v for k, v in self.recall.items()},
            "ndcg": {str(k): v for k, v in self.ndcg.items()},
        }
        if self.groups is not None:
            out["groups"] = {
                name: {
                    "n_users": g.n_users,
                    "recall": None if g.recall is None else {str(k): v for k, v in g.recall.items()},
                    "ndcg": None if g.ndcg is None else {str(k): v for k, v in g.ndcg.items()},
                }
                for name, g in self.groups.items()
            }
        return out


def popularity_groups(corpus: InteractionCorpus) -> dict[str, str]:
    """Tertiles of the catalog by train-split frequency, least popular first.

    Items sort ascending by (count, item id); remainder items land in the
    lower-popularity groups, so group sizes differ by at most one.
    """
    counts = corpus.train_item_counts()
    ordered = sorted(corpus.items, key=lambda item: (counts.get(item, 0), item))
    out: dict[str, str] = {}
    for name, chunk in zip(GROUP_NAMES, np.array_split(np.array(ordered, dtype=object), 3)):
        for item in chunk:
            out[str(item)] = name
    return out


def _aggregate(rows: list[dict[int, float]], ks: tuple[int, ...]) -> dict[int, float]:
    return {k: float(np.mean([r[k] for r in rows])) for k in ks}


def popularity_group_eval(
    per_user: list[tuple[str, dict[int, float], dict[int, float]]],
    corpus: InteractionCorpus,
    ks: tuple[int, ...],
) -> dict[str, GroupMetrics]:
    """Split per-user (target, recall, ndcg) rows by the target item's group."""
    groups = popularity_groups(corpus)
    buckets: dict[str, list[tuple[dict[int, float], dict[int, float]]]] = {
        name: [] for name in GROUP_NAMES
    }
    for target, recall, ndcg in per_user:
        buckets[groups[target]].append((recall, ndcg))
    out = {}
    for name, rows in buckets.items():
        if not rows:
            out[name] = GroupMetrics(n_users=0, recall=None, ndcg=None)
        else:
            out[name] = GroupMetrics(
                n_users=len(rows),
                recall=_aggregate([r for r, _ in rows], ks),
                ndcg=_aggregate([n for _, n in rows], ks),
            )
    return out


def evaluate(
    model,
    trie: SidTrie,
    corpus: InteractionCorpus,
    features: FeatureSet,
    split: str,
    cfg: PipelineConfig,
    tensors=None,
    ats: TemperatureConfig | None = None,
    ks: tuple[int, ...] = (10, 20),
    user_limit: int | None = None,
    with_groups: bool = False,
    export_path: str | Path | None = None,
) -> MetricsReport:
    """Beam-search the catalog per user and average leave-one-out metrics."""
    from .recommender import build_item_tensors, holdout_examples, recommend

    features = features.normalized(cfg.n_levels)
    if tensors is None:
        tensors = build_item_tensors(features, trie.to_sid_map(), cfg.n_levels)
    if ats is None:
        ats = TemperatureConfig(
            tau_min=cfg.tau_min, tau_max=cfg.tau_max, alpha=cfg.tau_alpha,
            n_ref=cfg.resolve_n_ref(len(trie)),
        )
    examples = holdout_examples(corpus, split)
    if user_limit is not None:
        examples = examples[:user_limit]

    top_n = max(max(ks), 1)
    width = max(cfg.beam_width, top_n)
    per_user: list[tuple[str, dict[int, float], dict[int, float]]] = []
    export_rows: list[str] = []
    for ex in examples:
        ranked_pairs = recommend(
            model, trie, tensors, ats, ex.hist_items, ex.hist_times,
            top_n=top_n, beam_width=width,
        )
        ranked = [item for item, _ in ranked_pairs]
        recall = {k: recall_at_k(ranked, ex.target_item, k) for k in ks}
        ndcg = {k: ndcg_at_k(ranked, ex.target_item, k) for k in ks}
        per_user.append((ex.target_item, recall, ndcg))
        if export_path is not None:
            for rank, (item, score) in enumerate(ranked_pairs, start=1):
                export_rows.append(f"{ex.user}\t{rank}\t{item}\t{score:.8f}")

    report = MetricsReport(
        recall=_aggregate([r for _, r, _ in per_user], ks),
        ndcg=_aggregate([n for _, _, n in per_user], ks),
        n_users=len(per_user),
    )
    if with_groups:
        report.groups = popularity_group_eval(per_user, corpus, ks)
    if export_path is not None:
        with open(export_path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(export_rows) + ("\n" if export_rows else ""))
    return report


def metrics_from_export(
    path: str | Path,
    targets: dict[str, str],
    ks: tuple[int, ...] = (10, 20),
) -> MetricsReport:
    """Recompute metrics from an exported ``user<TAB>rank<TAB>item<TAB>score`` file."""
    ranked: dict[str, list[tuple[int, str]]] = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            user, rank, item, _ = line.split("\t")
            ranked.setdefault(user, []).append((int(rank), item))
    recalls, ndcgs = [], []
    for user, rows in ranked.items():
        items = [item for _, item in sorted(rows)]
        recalls.append({k: recall_at_k(items, targets[user], k) for k in ks})
        ndcgs.append({k: ndcg_at_k(items, targets[user], k) for k in ks})
    return MetricsReport(
        recall=_aggregate(recalls, ks),
        ndcg=_aggregate(ndcgs, ks),
        n_users=len(ranked),
    )
