"""Pure NumPy versions of the compiled kernels in ``_ckernels.pyx``.

``direct_drift`` accumulates sources in the same order and with the same
floating-point operations as the compiled loop, so the two agree bit for bit.
``tree_drift`` walks the quadtree breadth-first over all targets at once; it
agrees with the compiled depth-first walk to rounding only.
"""
import numpy as np

INV_2PI = 1.0 / (2.0 * np.pi)


def direct_drift(pos, circ, delta, out, nthreads=1):
    n = pos.shape[0]
    x = pos[:, 0]
    y = pos[:, 1]
    d2 = delta * delta
    ax = np.zeros(n)
    ay = np.zeros(n)
    f = np.empty(n)
    for j in range(n):
        dx = x - x[j]
        dy = y - y[j]
        r2 = dx * dx + dy * dy + d2
        np.divide(circ[j], r2, out=f, where=r2 > 0.0)
        f[r2 <= 0.0] = 0.0
        ax -= dy * f
        ay += dx * f
    out[:, 0] = ax * INV_2PI / n
    out[:, 1] = ay * INV_2PI / n
    return out


def tree_drift(targets, spos, scirc, center, size, coef_re, coef_im, child,
               start, end, theta, delta, n_norm, out, nthreads=1):
    """Barnes-Hut sum for every target.

    ``spos``/``scirc`` are the tree-sorted sources, node ``k`` owns sources
    ``start[k]:end[k]`` and has children ``child[k]`` (-1 when absent).
    """
    nt = targets.shape[0]
    zt = targets[:, 0] + 1j * targets[:, 1]
    w = np.zeros(nt, dtype=complex)  # conjugate velocity, up to -i/(2 pi)
    ux = np.zeros(nt)
    uy = np.zeros(nt)
    coef = coef_re + 1j * coef_im
    order = coef.shape[1]
    d2 = delta * delta

    tid = np.arange(nt)
    nid = np.zeros(nt, dtype=np.int64)
    while tid.size:
        c = center[nid, 0] + 1j * center[nid, 1]
        r = zt[tid] - c
        dist = np.abs(r)
        far = size[nid] < theta * dist
        if np.any(far):
            t_f, n_f, r_f = tid[far], nid[far], r[far]
            inv = 1.0 / r_f
            acc = np.zeros(t_f.size, dtype=complex)
            p = inv.copy()
            for k in range(order):
                acc += coef[n_f, k] * p
                p = p * inv
            if d2 > 0.0:
                a2 = np.abs(r_f) ** 2
                acc *= a2 / (a2 + d2)
            np.add.at(w, t_f, acc)
        near = ~far
        t_n, n_n = tid[near], nid[near]
        is_leaf = np.all(child[n_n] < 0, axis=1)
        # leaves: direct interaction with owned sources
        for t, k in zip(t_n[is_leaf], n_n[is_leaf]):
            dx = targets[t, 0] - spos[start[k]:end[k], 0]
            dy = targets[t, 1] - spos[start[k]:end[k], 1]
            r2 = dx * dx + dy * dy + d2
            m = scirc[start[k]:end[k]]
            ok = r2 > 0.0
            f = np.zeros_like(r2)
            f[ok] = m[ok] / r2[ok]
            ux[t] -= np.sum(dy * f)
            uy[t] += np.sum(dx * f)
        t_i, n_i = t_n[~is_leaf], n_n[~is_leaf]
        kids = child[n_i]
        valid = kids >= 0
        tid = np.repeat(t_i, valid.sum(axis=1))
        nid = kids[valid]
    # -i/(2pi) * w gives u1 - i u2
    out[:, 0] = (ux + (w.imag)) * INV_2PI / n_norm
    out[:, 1] = (uy + (w.real)) * INV_2PI / n_norm
    return out
