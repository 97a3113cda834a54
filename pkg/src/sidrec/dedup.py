"""Collision diagnostics and entropic-transport deduplication of semantic IDs.

Colliding items (distinct items sharing a full SID) are redistributed to
nearby unused SIDs: within each collision group the item closest to the
group's reconstruction keeps the SID, the rest are matched to candidate SIDs
via Sinkhorn-scaled transport plans rounded to a one-to-one assignment.
"""

from __future__ import annotations

import itertools
import logging
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

Sid = tuple[int, ...]


class DedupError(RuntimeError):
    """Not enough unused SIDs to resolve the collisions."""


@dataclass
class CollisionReport:
    """Share of items whose (prefix or full) SID is not unique."""

    prefix_rates: list[float]            # index l-1 = rate at prefix length l
    groups: dict[Sid, list[str]]         # full-SID collision groups, size >= 2

    @property
    def final_rate(self) -> float:
        return self.prefix_rates[-1]


@dataclass
class MoveRecord:
    item: str
    old_sid: Sid
    new_sid: Sid
    cost: float


@dataclass
class DedupAssignment:
    sid_map: dict[str, Sid]
    moves: list[MoveRecord] = field(default_factory=list)


def detect_collisions(sid_map: dict[str, Sid]) -> CollisionReport:
    if not sid_map:
        return CollisionReport(prefix_rates=[0.0], groups={})
    n_levels = len(next(iter(sid_map.values())))
    for item, sid in sid_map.items():
        if len(sid) != n_levels:
            raise ValueError(f"item {item!r} has SID length {len(sid)}, expected {n_levels}")
    total = len(sid_map)
    rates = []
    for plen in range(1, n_levels + 1):
        counts = Counter(sid[:plen] for sid in sid_map.values())
        shared = sum(c for c in counts.values() if c >= 2)
        rates.append(shared / total)
    groups: dict[Sid, list[str]] = defaultdict(list)
    for item in sorted(sid_map):
        groups[sid_map[item]].append(item)
    groups = {sid: items for sid, items in groups.items() if len(items) >= 2}
    return CollisionReport(prefix_rates=rates, groups=groups)


def codebook_perplexity(sid_map: dict[str, Sid], level: int, codebook_size: int) -> float:
    """exp(entropy) of code usage at a 1-based level; K under uniform usage."""
    if not sid_map:
        raise ValueError("empty SID map")
    counts = Counter(sid[level - 1] for sid in sid_map.values())
    total = sum(counts.values())
    entropy = -sum((c / total) * math.log(c / total) for c in counts.values() if c > 0)
    del codebook_size  # usage frequencies already absorb unused codes (0 ln 0 = 0)
    return math.exp(entropy)


def perplexity_report(sid_map: dict[str, Sid], n_levels: int, codebook_size: int) -> dict:
    per_level = [codebook_perplexity(sid_map, l, codebook_size) for l in range(1, n_levels + 1)]
    geo = math.exp(sum(math.log(p) for p in per_level) / n_levels)
    return {"per_level": per_level, "geometric_mean": geo}


def level_code_purity(sid_map: dict[str, Sid], labels: dict[str, object], level: int = 1) -> float:
    """Majority-label purity of the clustering induced by codes at one level."""
    clusters: dict[int, Counter] = defaultdict(Counter)
    for item, sid in sid_map.items():
        clusters[sid[level - 1]][labels[item]] += 1
    total = sum(sum(c.values()) for c in clusters.values())
    agree = sum(max(c.values()) for c in clusters.values())
    return agree / total


def _reconstruction(codebooks: np.ndarray, sid: Sid) -> np.ndarray:
    return sum(codebooks[l, c] for l, c in enumerate(sid))


def _candidate_stream(base: Sid, codebook_size: int, taken: set[Sid]):
    """Unused SIDs near ``base``: deepest-level substitutions first, widening upward."""
    n_levels = len(base)
    subsets = [
        s
        for size in range(1, n_levels + 1)
        for s in itertools.combinations(range(n_levels), size)
    ]
    subsets.sort(key=lambda s: (n_levels - 1 - min(s), len(s), s))
    for subset in subsets:
        choices = [
            [c for c in range(codebook_size) if c != base[lvl]]
            for lvl in subset
        ]
        for combo in itertools.product(*choices):
            sid = list(base)
            for lvl, value in zip(subset, combo):
                sid[lvl] = value
            cand = tuple(sid)
            if cand not in taken:
                yield cand


def sinkhorn_plan(
    cost: np.ndarray, eps: float, max_iter: int, tol: float = 1e-9
) -> tuple[np.ndarray, bool]:
    """Entropic transport plan with uniform marginals, in the log domain.

    ``cost`` may contain +inf for forbidden pairs. Returns (plan, converged);
    plan rows/columns each sum to 1/m at convergence (square m x m input).
    """
    m = cost.shape[0]
    assert cost.shape == (m, m)
    log_mass = -math.log(m)
    scaled = -cost / eps
    f = np.zeros(m)
    g = np.zeros(m)
    converged = False
    for _ in range(max_iter):
        f = eps * (log_mass - _logsumexp(scaled + g[None, :] / eps, axis=1))
        g = eps * (log_mass - _logsumexp(scaled + f[:, None] / eps, axis=0))
        plan = np.exp(scaled + (f[:, None] + g[None, :]) / eps)
        err = max(
            np.abs(plan.sum(axis=1) - 1.0 / m).max(),
            np.abs(plan.sum(axis=0) - 1.0 / m).max(),
        )
        if err < tol:
            converged = True
            break
    plan = np.exp(scaled + (f[:, None] + g[None, :]) / eps)
    return plan, converged


def _logsumexp(a: np.ndarray, axis: int) -> np.ndarray:
    hi = np.max(a, axis=axis, keepdims=True)
    hi = np.where(np.isfinite(hi), hi, 0.0)
    out = np.log(np.sum(np.exp(a - hi), axis=axis)) + np.squeeze(hi, axis=axis)
    return out


def _round_to_matching(plan: np.ndarray, cost: np.ndarray, n_real: int) -> list[int]:
    """Greedy mass-descending rounding with augmenting-path repair.

    Returns, for each real row, the chosen column. Raises if no perfect
    matching over finite-cost edges exists.
    """
    m = plan.shape[1]
    order = sorted(
        ((i, j) for i in range(n_real) for j in range(m) if np.isfinite(cost[i, j])),
        key=lambda ij: (-plan[ij[0], ij[1]], ij[0], ij[1]),
    )
    row_of_col = [-1] * m
    col_of_row = [-1] * n_real
    for i, j in order:
        if col_of_row[i] == -1 and row_of_col[j] == -1:
            col_of_row[i] = j
            row_of_col[j] = i

    def try_augment(i: int, visited: set[int]) -> bool:
        cols = sorted(range(m), key=lambda j: (cost[i, j], j))
        for j in cols:
            if not np.isfinite(cost[i, j]) or j in visited:
                continue
            visited.add(j)
            if row_of_col[j] == -1 or try_augment(row_of_col[j], visited):
                row_of_col[j] = i
                col_of_row[i] = j
                return True
        return False

    for i in range(n_real):
        if col_of_row[i] == -1 and not try_augment(i, set()):
            raise DedupError("SID space saturated")
    return col_of_row


def sinkhorn_dedup(
    sid_map: dict[str, Sid],
    latents: dict[str, np.ndarray],
    codebooks: np.ndarray,
    eps_scale: float = 0.05,
    max_iter: int = 500,
    candidate_cap: int = 64,
) -> DedupAssignment:
    """Resolve every full-SID collision; non-colliding items keep their SIDs."""
    n_levels, codebook_size, _ = codebooks.shape
    report = detect_collisions(sid_map)
    result = dict(sid_map)
    moves: list[MoveRecord] = []
    if not report.groups:
        return DedupAssignment(sid_map=result, moves=moves)

    taken: set[Sid] = set(sid_map.values())
    n_movers_total = sum(len(items) - 1 for items in report.groups.values())
    available = codebook_size**n_levels - len(taken)
    if available < n_movers_total:
        raise DedupError(
            f"SID space saturated: {n_movers_total} reassignments needed, {available} SIDs free"
        )

    for sid in sorted(report.groups):
        items = report.groups[sid]
        recon = _reconstruction(codebooks, sid).astype(np.float64)
        residual = {it: float(((latents[it] - recon) ** 2).sum()) for it in items}
        ranked = sorted(items, key=lambda it: (residual[it], it))
        movers = ranked[1:]  # lowest-residual item keeps the SID

        pool_target = max(candidate_cap, 2 * len(movers))
        stream = _candidate_stream(sid, codebook_size, taken)
        pool: list[Sid] = []
        while True:
            before = len(pool)
            pool.extend(itertools.islice(stream, pool_target - len(pool)))
            if len(pool) < len(movers) or (len(pool) == before and before > 0):
                raise DedupError("SID space saturated")

            cand_recon = np.stack([_reconstruction(codebooks, c) for c in pool])
            z = np.stack([latents[it] for it in movers]).astype(np.float64)
            cost = ((z[:, None, :] - cand_recon[None, :, :]) ** 2).sum(axis=2)

            square = np.zeros((len(pool), len(pool)))
            square[: len(movers)] = cost
            eps = max(eps_scale * float(np.median(cost)), 1e-12)
            plan, converged = sinkhorn_plan(square, eps, max_iter)
            if not converged:
                log.warning("transport scaling hit max_iter for group %s; rounding anyway", sid)
            try:
                cols = _round_to_matching(plan, square, len(movers))
            except DedupError:
                pool_target *= 2  # widen the neighborhood and retry
                continue
            break

        for i, item in enumerate(movers):
            new_sid = pool[cols[i]]
            result[item] = new_sid
            taken.add(new_sid)
            moves.append(MoveRecord(item=item, old_sid=sid, new_sid=new_sid, cost=float(cost[i, cols[i]])))

    return DedupAssignment(sid_map=result, moves=moves)
