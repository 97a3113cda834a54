"""Interaction-log ingestion, k-core filtering, and leave-one-out splits."""

from __future__ import annotations

from collections import Counter, defaultdict
from dataclasses import dataclass
from pathlib import Path


class CorpusError(ValueError):
    """Malformed input data or an empty result after filtering."""


@dataclass(frozen=True)
class Interaction:
    user_id: str
    item_id: str
    timestamp: int


@dataclass(frozen=True)
class Split:
    """Leave-one-out split of one user's truncated sequence."""

    train: tuple[str, ...]
    valid: str
    test: str

    @property
    def full(self) -> tuple[str, ...]:
        return self.train + (self.valid, self.test)


@dataclass
class InteractionCorpus:
    users: list[str]
    items: list[str]
    sequences: dict[str, list[str]]   # truncated, chronological
    times: dict[str, list[int]]       # timestamps aligned with sequences
    splits: dict[str, Split]
    n_interactions: int               # at the k-core fixed point, pre-truncation

    def stats(self) -> dict:
        total = self.n_interactions
        return {
            "n_users": len(self.users),
            "n_items": len(self.items),
            "n_interactions": total,
            "avg_len": total / len(self.users) if self.users else 0.0,
        }

    def train_item_counts(self) -> Counter:
        """Item occurrence counts over train-split interactions only."""
        counts: Counter = Counter()
        for split in self.splits.values():
            counts.update(split.train)
        return counts


def load_interactions(path: str | Path) -> list[Interaction]:
    """Parse a tab-separated ``user<TAB>item<TAB>timestamp`` file.

    Exact duplicate triples are dropped; otherwise file order is preserved.
    """
    records: list[Interaction] = []
    seen: set[tuple[str, str, int]] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise CorpusError(f"line {lineno}: missing field (expected user<TAB>item<TAB>timestamp)")
            user, item, ts_raw = parts
            if not user or not item or not ts_raw:
                raise CorpusError(f"line {lineno}: missing field (expected user<TAB>item<TAB>timestamp)")
            try:
                ts = int(ts_raw)
            except ValueError:
                raise CorpusError(f"line {lineno}: timestamp {ts_raw!r} is not an integer") from None
            if ts < 0:
                raise CorpusError(f"line {lineno}: negative timestamp")
            key = (user, item, ts)
            if key in seen:
                continue
            seen.add(key)
            records.append(Interaction(user, item, ts))
    return records


def k_core_filter(
    interactions: list[Interaction],
    k: int,
    max_len: int = 20,
) -> InteractionCorpus:
    """Iteratively drop users/items with fewer than ``k`` interactions, then split.

    After the fixed point, each user's sequence is sorted by timestamp (stable
    in input order on ties), truncated to the most recent ``max_len`` items,
    and split leave-one-out: last item is test, second-to-last is validation.
    """
    if k < 1:
        raise ValueError("k must be >= 1")

    alive = list(interactions)
    while True:
        user_deg = Counter(r.user_id for r in alive)
        item_deg = Counter(r.item_id for r in alive)
        bad_users = {u for u, d in user_deg.items() if d < k}
        bad_items = {i for i, d in item_deg.items() if d < k}
        if not bad_users and not bad_items:
            break
        alive = [r for r in alive if r.user_id not in bad_users and r.item_id not in bad_items]
        if not alive:
            raise CorpusError("corpus empty after k-core")
    if not alive:
        raise CorpusError("corpus empty after k-core")

    by_user: dict[str, list[tuple[int, int, str]]] = defaultdict(list)
    for order, rec in enumerate(alive):
        by_user[rec.user_id].append((rec.timestamp, order, rec.item_id))

    users = sorted(by_user)
    sequences: dict[str, list[str]] = {}
    times: dict[str, list[int]] = {}
    splits: dict[str, Split] = {}
    for user in users:
        entries = sorted(by_user[user])  # (timestamp, input order) is a stable total order
        tail = entries[-max_len:]
        sequences[user] = [item for _, _, item in tail]
        times[user] = [ts for ts, _, _ in tail]
        seq = sequences[user]
        splits[user] = Split(train=tuple(seq[:-2]), valid=seq[-2], test=seq[-1])

    # The catalog keeps every item at the k-core fixed point, even ones whose
    # occurrences were all truncated away: they survived filtering and their
    # features remain loadable.
    items = sorted({r.item_id for r in alive})

    return InteractionCorpus(
        users=users,
        items=items,
        sequences=sequences,
        times=times,
        splits=splits,
        n_interactions=len(alive),
    )


def normalize_popularity(corpus: InteractionCorpus) -> dict[str, float]:
    """Min-max normalize train-split item counts into [0, 1].

    A flat count distribution maps every item to 0 (no popularity evidence).
    """
    if not corpus.items:
        raise CorpusError("corpus has no items")
    counts = corpus.train_item_counts()
    values = [counts.get(item, 0) for item in corpus.items]
    lo, hi = min(values), max(values)
    if hi == lo:
        return {item: 0.0 for item in corpus.items}
    span = hi - lo
    return {item: (counts.get(item, 0) - lo) / span for item in corpus.items}
