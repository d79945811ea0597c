# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled N-body kernels for the point-vortex drift.

Per-target summation order is fixed (sources in index order for the direct
sum, depth-first child order for the tree), so results do not depend on the
number of OpenMP threads.
"""
from cython.parallel import prange
from cython.parallel cimport threadid

import numpy as np

cdef double INV_2PI = 0.15915494309189535


def direct_drift(const double[:, ::1] pos, const double[::1] circ, double delta,
                 double[:, ::1] out, int nthreads=1):
    cdef Py_ssize_t n = pos.shape[0]
    cdef Py_ssize_t i, j
    cdef double xi, yi, dx, dy, r2, f, ax, ay
    cdef double d2 = delta * delta
    cdef double dn = <double> n
    for i in prange(n, nogil=True, num_threads=nthreads, schedule="static"):
        xi = pos[i, 0]
        yi = pos[i, 1]
        ax = 0.0
        ay = 0.0
        for j in range(n):
            dx = xi - pos[j, 0]
            dy = yi - pos[j, 1]
            r2 = dx * dx + dy * dy + d2
            if r2 > 0.0:
                f = circ[j] / r2
            else:
                f = 0.0
            ax = ax - dy * f
            ay = ay + dx * f
        out[i, 0] = ax * INV_2PI / dn
        out[i, 1] = ay * INV_2PI / dn
    return np.asarray(out)


def tree_drift(const double[:, ::1] targets, const double[:, ::1] spos,
               const double[::1] scirc, const double[:, ::1] center,
               const double[::1] size, const double[:, ::1] coef_re,
               const double[:, ::1] coef_im, const long[:, ::1] child,
               const long[::1] start, const long[::1] end, double theta,
               double delta, double n_norm, double[:, ::1] out, int nthreads=1):
    cdef Py_ssize_t nt = targets.shape[0]
    cdef Py_ssize_t nnodes = size.shape[0]
    cdef Py_ssize_t order = coef_re.shape[1]
    cdef Py_ssize_t t, k, q, c, s, top
    cdef double tx, ty, rx, ry, dist2, ir, ii, pr, pi_, tmp, wr, wi, ux, uy
    cdef double dx, dy, r2, f, scale
    cdef double d2 = delta * delta
    cdef double th2 = theta * theta
    # every node is pushed at most once per target
    cdef long[:, ::1] stack = np.empty((nthreads if nthreads > 0 else 1, nnodes + 4), dtype=np.int64)
    cdef Py_ssize_t tid
    for t in prange(nt, nogil=True, num_threads=nthreads, schedule="dynamic"):
        tid = threadid()
        tx = targets[t, 0]
        ty = targets[t, 1]
        wr = 0.0
        wi = 0.0
        ux = 0.0
        uy = 0.0
        stack[tid, 0] = 0
        top = 1
        while top > 0:
            top = top - 1
            k = stack[tid, top]
            rx = tx - center[k, 0]
            ry = ty - center[k, 1]
            dist2 = rx * rx + ry * ry
            if size[k] * size[k] < th2 * dist2:
                # 1/r as a complex number
                ir = rx / dist2
                ii = -ry / dist2
                pr = ir
                pi_ = ii
                scale = 1.0
                if d2 > 0.0:
                    scale = dist2 / (dist2 + d2)
                for q in range(order):
                    wr = wr + scale * (coef_re[k, q] * pr - coef_im[k, q] * pi_)
                    wi = wi + scale * (coef_re[k, q] * pi_ + coef_im[k, q] * pr)
                    tmp = pr * ir - pi_ * ii
                    pi_ = pr * ii + pi_ * ir
                    pr = tmp
            elif child[k, 0] < 0 and child[k, 1] < 0 and child[k, 2] < 0 and child[k, 3] < 0:
                for s in range(start[k], end[k]):
                    dx = tx - spos[s, 0]
                    dy = ty - spos[s, 1]
                    r2 = dx * dx + dy * dy + d2
                    if r2 > 0.0:
                        f = scirc[s] / r2
                    else:
                        f = 0.0
                    ux = ux - dy * f
                    uy = uy + dx * f
            else:
                # push in reverse so children are visited in index order
                for c in range(3, -1, -1):
                    if child[k, c] >= 0:
                        stack[tid, top] = child[k, c]
                        top = top + 1
        out[t, 0] = (ux + wi) * INV_2PI / n_norm
        out[t, 1] = (uy + wr) * INV_2PI / n_norm
    return np.asarray(out)
