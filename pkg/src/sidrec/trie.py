"""Prefix tree over assigned SIDs, branching-aware temperatures, beam decoding."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

Sid = tuple[int, ...]


class TrieError(ValueError):
    pass


class SidTrie:
    """Immutable-after-build prefix tree; every root-to-leaf path has length L."""

    def __init__(self, n_levels: int):
        self.n_levels = n_levels
        self._root: dict = {}
        self._leaves: dict[Sid, str] = {}

    @classmethod
    def build(cls, assignment: dict[str, Sid]) -> "SidTrie":
        if not assignment:
            raise TrieError("cannot build a trie from an empty assignment")
        n_levels = len(next(iter(assignment.values())))
        trie = cls(n_levels)
        for item in sorted(assignment):
            sid = assignment[item]
            if len(sid) != n_levels:
                raise TrieError(f"item {item!r} has SID length {len(sid)}, expected {n_levels}")
            if sid in trie._leaves:
                raise TrieError(f"duplicate SID {sid} for items {trie._leaves[sid]!r} and {item!r}")
            node = trie._root
            for code in sid[:-1]:
                node = node.setdefault(int(code), {})
            node[int(sid[-1])] = item
            trie._leaves[sid] = item
        return trie

    def __len__(self) -> int:
        return len(self._leaves)

    def _node(self, prefix: Sequence[int]) -> dict:
        if len(prefix) >= self.n_levels:
            raise TrieError(f"prefix {tuple(prefix)} is not shorter than the SID length")
        node = self._root
        for depth, code in enumerate(prefix):
            if int(code) not in node:
                raise TrieError(f"prefix {tuple(prefix)} invalid at depth {depth + 1}")
            node = node[int(code)]
        return node

    def children(self, prefix: Sequence[int]) -> list[int]:
        return sorted(self._node(prefix).keys())

    def branching_factor(self, prefix: Sequence[int]) -> int:
        return len(self._node(prefix))

    def lookup(self, sid: Sequence[int]) -> str | None:
        return self._leaves.get(tuple(int(c) for c in sid))

    def items(self) -> dict[Sid, str]:
        return dict(self._leaves)

    def to_sid_map(self) -> dict[str, Sid]:
        return {item: sid for sid, item in self._leaves.items()}


@dataclass
class TemperatureConfig:
    """Exponential decay of softmax temperature with trie branching factor."""

    tau_min: float = 0.5
    tau_max: float = 1.0
    alpha: float = 0.5
    n_ref: float = 1.0

    def __post_init__(self) -> None:
        if not (0.0 < self.tau_min <= self.tau_max):
            raise ValueError("need 0 < tau_min <= tau_max")
        if self.alpha < 0 or self.n_ref <= 0:
            raise ValueError("alpha must be >= 0 and n_ref > 0")


def adaptive_temperature(cfg: TemperatureConfig, branching: float) -> float:
    if branching < 0:
        raise ValueError("branching factor cannot be negative")
    return cfg.tau_min + (cfg.tau_max - cfg.tau_min) * math.exp(-cfg.alpha * branching / cfg.n_ref)


# A scorer maps a list of prefixes to one row of next-code logits per prefix.
Scorer = Callable[[list[Sid]], np.ndarray]


def constrained_beam_search(
    scorer: Scorer,
    trie: SidTrie,
    temperature: TemperatureConfig,
    beam_width: int,
    top_n: int,
) -> list[tuple[str, float]]:
    """Beam-decode complete SIDs, expanding only children present in the trie.

    Candidate scores accumulate log softmax(logits / tau) restricted to valid
    children. Ties rank by SID lexicographic order. Returns up to ``top_n``
    (item, score) pairs, best first.
    """
    if beam_width < 1:
        raise ValueError("beam_width must be >= 1")
    if beam_width < top_n:
        raise ValueError("beam_width must be >= top_n")

    beams: list[tuple[Sid, float]] = [((), 0.0)]
    for _ in range(trie.n_levels):
        prefixes = [sid for sid, _ in beams]
        logits = np.asarray(scorer(prefixes), dtype=np.float64)
        if logits.ndim != 2 or logits.shape[0] != len(prefixes):
            raise ValueError("scorer must return one logit row per prefix")
        expanded: list[tuple[Sid, float]] = []
        for row, (prefix, score) in enumerate(beams):
            kids = trie.children(prefix)
            tau = adaptive_temperature(temperature, trie.branching_factor(prefix))
            scaled = logits[row, kids] / tau
            scaled -= scaled.max()
            logprob = scaled - math.log(np.exp(scaled).sum())
            for pos, code in enumerate(kids):
                expanded.append((prefix + (code,), score + float(logprob[pos])))
        expanded.sort(key=lambda entry: (-entry[1], entry[0]))
        beams = expanded[:beam_width]

    out: list[tuple[str, float]] = []
    for sid, score in beams[:top_n]:
        item = trie.lookup(sid)
        assert item is not None  # beams only traverse trie paths
        out.append((item, score))
    return out
