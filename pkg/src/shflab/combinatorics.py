"""Pair-assignment combinatorics for collision diagrams.

A diagram on h particles is indexed by an ordered sequence of unordered
pairs {i_r, j_r} from {1..h} with consecutive pairs distinct.  This module
counts and enumerates those sequences, resolves for every pair member the
index of its previous collision, and tabulates the coefficients c^m_i
defined by

    c^0_0 = 1,   c^k_i = 0 for i > k,   c^(k+1)_i = sum_{j<=i} c^k_j,

which satisfy the closed form c^m_i = (m-i+1)/i! * (m+i)!/(m+1)! <= 4^m.
Everything is exact integer arithmetic (Python integers are unbounded, so
rows far beyond m = 60 are safe).
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

from .errors import CapacityError, ConfigurationError, DomainError


@dataclass(frozen=True)
class PairSequence:
    """An admissible sequence of collision pairs on {1..h}."""

    h: int
    pairs: tuple[frozenset, ...]

    def __post_init__(self):
        if self.h < 2:
            raise ConfigurationError("need at least two particles")
        norm = tuple(frozenset(p) for p in self.pairs)
        object.__setattr__(self, "pairs", norm)
        for p in norm:
            if len(p) != 2 or not all(1 <= i <= self.h for i in p):
                raise ConfigurationError(f"invalid pair {set(p)} for h = {self.h}")
        for a, b in zip(norm, norm[1:]):
            if a == b:
                raise ConfigurationError("consecutive pairs must differ")

    def __len__(self):
        return len(self.pairs)


class CoefficientTable:
    """Triangular table of the c^m_i, built once by the row recursion."""

    def __init__(self, max_m: int):
        if max_m < 0:
            raise DomainError("max_m must be nonnegative")
        self.max_m = max_m
        rows = [[1]]
        for k in range(max_m):
            prev = rows[k]
            row = []
            acc = 0
            for i in range(k + 2):
                acc += prev[i] if i <= k else 0
                row.append(acc)
            rows.append(row)
        self._rows = rows

    def __getitem__(self, mi):
        m, i = mi
        if m < 0 or i < 0:
            raise DomainError("indices must be nonnegative")
        if m > self.max_m:
            raise DomainError(f"table built up to m = {self.max_m}")
        return self._rows[m][i] if i <= m else 0


def c_coeff_recursive(m: int, i: int, _cache={}) -> int:
    """c^m_i via the tabulated recursion (exact integers)."""
    if m < 0 or i < 0:
        raise DomainError("m and i must be nonnegative")
    if i > m:
        return 0
    table = _cache.get("table")
    if table is None or table.max_m < m:
        table = CoefficientTable(max(2 * m, 64))
        _cache["table"] = table
    return table[m, i]


def c_coeff_closed(m: int, i: int) -> int:
    """Closed form c^m_i = (m-i+1)/i! * (m+i)!/(m+1)!, exact."""
    if m < 0 or i < 0:
        raise DomainError("m and i must be nonnegative")
    if i > m:
        raise DomainError(f"closed form requires i <= m, got ({m}, {i})")
    num = (m - i + 1) * math.factorial(m + i)
    den = math.factorial(i) * math.factorial(m + 1)
    q, r = divmod(num, den)
    assert r == 0, "closed form is an exact integer"
    return q


def pair_sequence_count(h: int, m: int) -> int:
    """Number of admissible length-m pair sequences on {1..h}."""
    if h < 2 or m < 0:
        raise DomainError("need h >= 2 and m >= 0")
    if m == 0:
        return 1
    npairs = h * (h - 1) // 2
    return npairs * (npairs - 1) ** (m - 1)


def enumerate_pair_sequences(h: int, m: int, cap: int = 100_000) -> list[PairSequence]:
    """All admissible sequences, exactly once each.

    Refuses to enumerate when the count exceeds ``cap``.
    """
    count = pair_sequence_count(h, m)
    if count > cap:
        raise CapacityError(f"{count} sequences exceed cap {cap}")
    all_pairs = [frozenset(p) for p in itertools.combinations(range(1, h + 1), 2)]
    out = []
    def extend(prefix):
        if len(prefix) == m:
            out.append(PairSequence(h=h, pairs=tuple(prefix)))
            return
        for p in all_pairs:
            if prefix and prefix[-1] == p:
                continue
            prefix.append(p)
            extend(prefix)
            prefix.pop()
    extend([])
    return out


def collision_pointers(seq: PairSequence) -> list[tuple[int, int]]:
    """Previous-collision indices for each pair of the sequence.

    For pair r = 1..m and each member, returns the largest l < r whose
    pair contains that member, or 0 if the member is colliding for the
    first time (by convention that points at the diagram's origin).
    """
    out = []
    last_seen: dict[int, int] = {}
    for r, pair in enumerate(seq.pairs, start=1):
        i, j = sorted(pair)
        out.append((last_seen.get(i, 0), last_seen.get(j, 0)))
        last_seen[i] = r
        last_seen[j] = r
    return out
