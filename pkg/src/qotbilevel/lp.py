"""Exact discrete Kantorovich problem via the transportation simplex method.

Oracle-scale only (at most 65536 cells).  Pivoting uses the most negative
reduced cost, and switches to Bland's rule after a run of degenerate pivots
so that degenerate instances cannot cycle.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .grid import Field, Grid2D
from .measures import DiscreteMeasure

MAX_CELLS = 65536


class LpError(ValueError):
    pass


@dataclass(eq=False)
class TransportPlan:
    grid: Grid2D
    weights: dict = field(repr=False)  # (i, j) -> mass
    cost_value: float = 0.0

    def dense(self) -> np.ndarray:
        out = np.zeros(self.grid.shape)
        for (i, j), w in self.weights.items():
            out[i, j] = w
        return out

    @property
    def support_size(self) -> int:
        return sum(1 for w in self.weights.values() if w > 0)


@dataclass(eq=False)
class LpPotentials:
    phi: np.ndarray
    psi: np.ndarray


def _northwest_corner(a, b):
    n1, n2 = a.size, b.size
    ra, rb = a.copy(), b.copy()
    basis = []
    flows = []
    i = j = 0
    while True:
        x = min(ra[i], rb[j])
        basis.append((i, j))
        flows.append(x)
        ra[i] -= x
        rb[j] -= x
        if i == n1 - 1 and j == n2 - 1:
            break
        if j == n2 - 1 or (i < n1 - 1 and ra[i] <= rb[j]):
            i += 1
        else:
            j += 1
    return basis, flows


class _Tree:
    """Spanning tree of basic cells on the bipartite row/column graph."""

    def __init__(self, n1, n2, basis):
        self.n1, self.n2 = n1, n2
        self.adj = [set() for _ in range(n1 + n2)]
        for i, j in basis:
            self.add(i, j)

    def add(self, i, j):
        self.adj[i].add(self.n1 + j)
        self.adj[self.n1 + j].add(i)

    def remove(self, i, j):
        self.adj[i].discard(self.n1 + j)
        self.adj[self.n1 + j].discard(i)

    def potentials(self, cost):
        n1 = self.n1
        u = np.full(n1, np.nan)
        v = np.full(self.n2, np.nan)
        u[0] = 0.0
        queue = deque([0])
        seen = {0}
        while queue:
            node = queue.popleft()
            for nb in self.adj[node]:
                if nb in seen:
                    continue
                seen.add(nb)
                if node < n1:
                    v[nb - n1] = cost[node, nb - n1] - u[node]
                else:
                    u[nb] = cost[nb, node - n1] - v[node - n1]
                queue.append(nb)
        if len(seen) != n1 + self.n2:
            raise LpError("basis is not a spanning tree")
        return u, v

    def path(self, src, dst):
        parent = {src: None}
        queue = deque([src])
        while queue:
            node = queue.popleft()
            if node == dst:
                break
            for nb in self.adj[node]:
                if nb not in parent:
                    parent[nb] = node
                    queue.append(nb)
        out = [dst]
        while out[-1] != src:
            out.append(parent[out[-1]])
        return out[::-1]


def _transport_simplex(cost, a, b, max_iter=None, degenerate_switch=50):
    n1, n2 = cost.shape
    basis, flows = _northwest_corner(a, b)
    flow = {cell: x for cell, x in zip(basis, flows)}
    tree = _Tree(n1, n2, basis)
    scale = max(1.0, float(np.max(np.abs(cost))))
    eps = 1e-12 * scale
    max_iter = max_iter or 50 * (n1 + n2) * max(n1, n2) + 1000
    degenerate_run = 0
    for _ in range(max_iter):
        u, v = tree.potentials(cost)
        red = cost - u[:, None] - v[None, :]
        bland = degenerate_run >= degenerate_switch
        if bland:
            cand = np.argwhere(red < -eps)
            if cand.size == 0:
                return flow, u, v
            i, j = (int(x) for x in cand[0])
        else:
            k = int(np.argmin(red))
            i, j = divmod(k, n2)
            if red[i, j] >= -eps:
                return flow, u, v
        # cycle: entering cell, then alternate along the tree path col j -> row i
        nodes = tree.path(n1 + j, i)
        cycle = [(i, j)]
        for p, q in zip(nodes[:-1], nodes[1:]):
            cycle.append((q, p - n1) if p >= n1 else (p, q - n1))
        minus = cycle[1::2]
        theta = min(flow[c] for c in minus)
        ties = [c for c in minus if flow[c] <= theta]
        leave = min(ties) if bland else ties[0]
        for k, c in enumerate(cycle):
            if k == 0:
                flow[c] = theta
            elif k % 2:
                flow[c] -= theta
            else:
                flow[c] += theta
        del flow[leave]
        tree.remove(*leave)
        tree.add(i, j)
        degenerate_run = degenerate_run + 1 if theta <= 0 else 0
    raise LpError("transportation simplex hit its iteration cap")


def solve_lp(cost: Field, mu1: DiscreteMeasure, mu2: DiscreteMeasure,
             mass_rtol: float = 1e-10) -> tuple[TransportPlan, LpPotentials]:
    """Optimal basic plan and dual potentials of the discrete transport LP."""
    g = cost.grid
    if not isinstance(g, Grid2D):
        raise LpError("cost must live on a product grid")
    if g.size > MAX_CELLS:
        raise LpError(f"instance has {g.size} cells, oracle cap is {MAX_CELLS}")
    a = np.asarray(mu1.weights, dtype=float)
    b = np.asarray(mu2.weights, dtype=float)
    if a.size != g.gx.n or b.size != g.gy.n:
        raise LpError("measure sizes do not match the cost grid")
    ma, mb = a.sum(), b.sum()
    if abs(ma - mb) > mass_rtol * max(ma, mb, 1e-300):
        raise LpError(f"marginal masses differ: {ma!r} vs {mb!r}")
    c = np.asarray(cost.values, dtype=float)
    flow, u, v = _transport_simplex(c, a, b)
    weights = {cell: max(x, 0.0) for cell, x in sorted(flow.items())}
    plan = TransportPlan(g, weights)
    plan.cost_value = kantorovich_cost(plan, cost)
    return plan, LpPotentials(u, v)


def kantorovich_cost(plan: TransportPlan, cost: Field) -> float:
    c = cost.values
    return float(sum(w * c[i, j] for (i, j), w in plan.weights.items()))


def complementarity_residual(plan: TransportPlan, pot: LpPotentials, cost: Field) -> float:
    """``sum pi_ij (phi_i + psi_j - c_ij)``; zero exactly at a complementary pair."""
    c = cost.values
    return float(sum(w * (pot.phi[i] + pot.psi[j] - c[i, j])
                     for (i, j), w in plan.weights.items()))


def dual_value(pot: LpPotentials, mu1: DiscreteMeasure, mu2: DiscreteMeasure) -> float:
    return float(np.dot(pot.phi, mu1.weights) + np.dot(pot.psi, mu2.weights))


def dual_infeasibility(pot: LpPotentials, cost: Field) -> float:
    """Largest violation of ``phi_i + psi_j <= c_ij`` (zero when dual feasible)."""
    return float(max(0.0, np.max(pot.phi[:, None] + pot.psi[None, :] - cost.values)))
