"""Exact maximum-clique search (branch and bound with greedy coloring).

Deterministic: candidates are colored and explored in a fixed order and only
strictly larger cliques replace the incumbent, so ties resolve to the first
maximum found.
"""

from __future__ import annotations

import numpy as np


def max_clique(adjacency: np.ndarray) -> list[int]:
    """Return one maximum clique of an undirected graph as sorted vertex ids.

    `adjacency` is a symmetric boolean matrix; the diagonal is ignored.
    """
    adj = np.asarray(adjacency, dtype=bool).copy()
    n = adj.shape[0]
    if n == 0:
        return []
    np.fill_diagonal(adj, False)

    best: list[int] = []

    def color_sort(cands: list[int]) -> tuple[list[int], list[int]]:
        # greedy coloring in index order; return vertices sorted by color
        classes: list[list[int]] = []
        color_of = {}
        for v in cands:
            for ci, cls in enumerate(classes):
                if not any(adj[v, u] for u in cls):
                    cls.append(v)
                    color_of[v] = ci + 1
                    break
            else:
                classes.append([v])
                color_of[v] = len(classes)
        # within a color, smaller ids go last so they are explored first
        ordered = sorted(cands, key=lambda v: (color_of[v], -v))
        return ordered, [color_of[v] for v in ordered]

    def expand(clique: list[int], cands: list[int]) -> None:
        nonlocal best
        ordered, colors = color_sort(cands)
        for i in range(len(ordered) - 1, -1, -1):
            # colors ascending: once one candidate fails the bound, all do
            if len(clique) + colors[i] <= len(best):
                return
            v = ordered[i]
            new_cands = [u for u in ordered[:i] if adj[v, u]]
            clique.append(v)
            if len(clique) > len(best):
                best = list(clique)
            if new_cands:
                expand(clique, new_cands)
            clique.pop()

    expand([], list(range(n)))
    return sorted(best)
