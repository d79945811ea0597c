"""Quadtree with complex multipole moments for Barnes-Hut summation.

For sources ``z_j`` with circulations ``m_j`` in a cell with geometric centre
``c``, the conjugate velocity at a far point ``z`` is

    -i/(2 pi) * sum_k a_k / (z - c)^(k+1),   a_k = sum_j m_j (z_j - c)^k.

``order=8`` (the default) keeps moments up to z^7; ``order=2`` is monopole plus dipole.
"""
from dataclasses import dataclass

import numpy as np

from . import _backend


@dataclass
class QuadTree:
    spos: np.ndarray      # sources sorted by tree order, (n, 2)
    scirc: np.ndarray     # matching circulations
    perm: np.ndarray      # spos = positions[perm]
    center: np.ndarray    # (nodes, 2) geometric cell centres
    size: np.ndarray      # (nodes,) cell side lengths
    coef_re: np.ndarray   # (nodes, order) multipole moments
    coef_im: np.ndarray
    child: np.ndarray     # (nodes, 4) child indices, -1 if absent
    start: np.ndarray
    end: np.ndarray

    @property
    def n_nodes(self):
        return self.size.shape[0]


def build_quadtree(positions, circulations, leaf_size=8, order=8, max_depth=48):
    """Build the tree and its multipole moments up to ``order`` terms."""
    pos = np.ascontiguousarray(positions, dtype=float)
    circ = np.ascontiguousarray(circulations, dtype=float)
    n = pos.shape[0]
    lo = pos.min(axis=0)
    hi = pos.max(axis=0)
    side = float(max(hi - lo)) * (1 + 1e-12) + 1e-300

    centers, sizes, children, starts, ends = [], [], [], [], []
    perm = np.empty(n, dtype=np.int64)
    cursor = 0

    def build(idx, c, s, depth):
        nonlocal cursor
        k = len(sizes)
        centers.append(c)
        sizes.append(s)
        children.append([-1, -1, -1, -1])
        starts.append(cursor)
        ends.append(cursor)
        if idx.size <= leaf_size or depth >= max_depth:
            perm[cursor:cursor + idx.size] = idx
            cursor += idx.size
        else:
            quad = (pos[idx, 0] >= c[0]).astype(int) + 2 * (pos[idx, 1] >= c[1]).astype(int)
            for q in range(4):  # SW, SE, NW, NE
                sub = idx[quad == q]
                if sub.size:
                    off = np.array([(q % 2) - 0.5, (q // 2) - 0.5]) * (s / 2)
                    children[k][q] = build(sub, c + off, s / 2, depth + 1)
        ends[k] = cursor
        return k

    build(np.arange(n), 0.5 * (lo + hi), side, 0)

    center = np.array(centers)
    start = np.array(starts, dtype=np.int64)
    end = np.array(ends, dtype=np.int64)
    spos = np.ascontiguousarray(pos[perm])
    scirc = np.ascontiguousarray(circ[perm])
    zs = spos[:, 0] + 1j * spos[:, 1]
    coef = np.zeros((len(sizes), order), dtype=complex)
    for k in range(len(sizes)):
        d = zs[start[k]:end[k]] - (center[k, 0] + 1j * center[k, 1])
        p = scirc[start[k]:end[k]].astype(complex)
        for q in range(order):
            coef[k, q] = p.sum()
            p = p * d
    return QuadTree(
        spos=spos,
        scirc=scirc,
        perm=perm,
        center=np.ascontiguousarray(center),
        size=np.array(sizes),
        coef_re=np.ascontiguousarray(coef.real),
        coef_im=np.ascontiguousarray(coef.imag),
        child=np.array(children, dtype=np.int64),
        start=start,
        end=end,
    )


def tree_drift(positions, circulations, theta=0.5, delta=0.0, order=8,
               leaf_size=8, nthreads=1, backend=None):
    """Barnes-Hut approximation of ``(1/N) sum_j m_j K(x_i - x_j)``."""
    tree = build_quadtree(positions, circulations, leaf_size=leaf_size, order=order)
    pos = np.ascontiguousarray(positions, dtype=float)
    out = np.zeros_like(pos)
    _backend.get(backend).tree_drift(
        pos, tree.spos, tree.scirc, tree.center, tree.size, tree.coef_re,
        tree.coef_im, tree.child, tree.start, tree.end, float(theta),
        float(delta), float(pos.shape[0]), out, nthreads,
    )
    return out
