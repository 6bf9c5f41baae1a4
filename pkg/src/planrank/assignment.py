"""Maximum-weight perfect assignment with a lexicographic tie-break.

``solve_assignment`` runs the O(n^3) shortest-augmenting-path Hungarian
method on negated scores. Its dual potentials certify which (row, column)
pairs can appear in *some* optimal assignment (zero reduced cost), so the
lexicographically smallest optimum is then found greedily inside that
tight subgraph, re-routing the current matching along alternating paths.
"""
from __future__ import annotations

import math

import numpy as np

from planrank.errors import NonFiniteScores


def _hungarian_min(cost: np.ndarray) -> tuple[list[int], np.ndarray, np.ndarray]:
    """Min-cost assignment. Returns (column of each row, row potentials, column potentials)."""
    n = cost.shape[0]
    inf = math.inf
    u = [0.0] * (n + 1)
    v = [0.0] * (n + 1)
    owner = [0] * (n + 1)  # owner[j]: row (1-based) matched to column j; 0 = free
    way = [0] * (n + 1)
    c = cost.tolist()
    for i in range(1, n + 1):
        owner[0] = i
        j0 = 0
        minv = [inf] * (n + 1)
        used = [False] * (n + 1)
        while True:
            used[j0] = True
            i0 = owner[j0]
            row = c[i0 - 1]
            ui0 = u[i0]
            delta = inf
            j1 = 0
            for j in range(1, n + 1):
                if not used[j]:
                    cur = row[j - 1] - ui0 - v[j]
                    if cur < minv[j]:
                        minv[j] = cur
                        way[j] = j0
                    if minv[j] < delta:
                        delta = minv[j]
                        j1 = j
            for j in range(n + 1):
                if used[j]:
                    u[owner[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if owner[j0] == 0:
                break
        while True:
            j1 = way[j0]
            owner[j0] = owner[j1]
            j0 = j1
            if j0 == 0:
                break
    col_of = [0] * n
    for j in range(1, n + 1):
        col_of[owner[j] - 1] = j - 1
    return col_of, np.array(u[1:]), np.array(v[1:])


def _lexicographic_min_matching(tight: list[list[int]], match: list[int]) -> list[int]:
    """Lexicographically smallest perfect matching using only ``tight`` edges.

    ``match`` must already be a perfect matching inside the tight graph.
    """
    n = len(match)
    match = list(match)
    row_of = [0] * n
    for r, col in enumerate(match):
        row_of[col] = r
    fixed_col = [False] * n

    def reroute(row: int, target: int, seen: list[bool]) -> bool:
        # Find new columns for unfixed rows so that ``target`` becomes free for ``row``'s old slot.
        for col in tight[row]:
            if fixed_col[col] or seen[col]:
                continue
            seen[col] = True
            if col == target or reroute(row_of[col], target, seen):
                match[row] = col
                row_of[col] = row
                return True
        return False

    for i in range(n):
        for col in tight[i]:
            if fixed_col[col]:
                continue
            if match[i] == col:
                break
            # Try to hand ``col`` to row i and let its current owner take over row i's column.
            other, freed = row_of[col], match[i]
            saved = (list(match), list(row_of))
            fixed_col[col] = True
            seen = [False] * n
            seen[col] = True
            if reroute(other, freed, seen):
                match[i] = col
                row_of[col] = i
                if match[other] == freed:
                    row_of[freed] = other
                break
            fixed_col[col] = False
            match, row_of = saved
        fixed_col[match[i]] = True
    return match


def assignment_value(scores: np.ndarray, perm) -> float:
    """Sum of ``scores[i, perm[i]]``, accumulated left to right."""
    total = 0.0
    for i, j in enumerate(perm):
        total += float(scores[i, j])
    return total


def solve_assignment(scores: np.ndarray, tol: float | None = None) -> tuple[list[int], float]:
    """Column for each row maximizing the total score; ties go to the lexicographically smallest."""
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim != 2 or s.shape[0] != s.shape[1]:
        raise ValueError(f"score matrix must be square, got shape {s.shape}")
    if not np.isfinite(s).all():
        raise NonFiniteScores("score matrix contains non-finite entries")
    n = s.shape[0]
    if n == 0:
        return [], 0.0
    match, u, v = _hungarian_min(-s)
    reduced = -s - u[:, None] - v[None, :]
    if tol is None:
        tol = 1e-12 * n * (1.0 + float(np.abs(s).max()))
    tight = [sorted(np.flatnonzero(reduced[i] <= tol).tolist()) for i in range(n)]
    for i in range(n):
        if match[i] not in tight[i]:
            tight[i] = sorted(tight[i] + [match[i]])
    perm = _lexicographic_min_matching(tight, match)
    return perm, assignment_value(s, perm)
