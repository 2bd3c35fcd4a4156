"""Compiled inner loops.

Every separable term reduces, along one coordinate, to

    minimize_z  (q/2) z^2 - r z + g(z)

and ``coord_argmin`` returns the exact minimizer for each shipped ``g``.
Codes for ``g`` are the ``CODE_*`` constants below.
"""

import numpy as np
from numba import njit

CODE_ELASTIC_NET = 0   # l1 |z| + (l2/2) z^2   (l2 form included, l1 = 0)
CODE_L1_BOUNDED = 1    # l1 |z| on [-bound, bound]
CODE_HINGE_DUAL = 2    # -y z on y z in [0, bound]
CODE_ABSDEV_DUAL = 3   # -y z on |z| <= bound
CODE_SQUARED_DUAL = 4  # z^2 / 2 - y z


@njit(cache=True)
def soft_threshold(x, t):
    if x > t:
        return x - t
    if x < -t:
        return x + t
    return 0.0


@njit(cache=True)
def _clip(z, lo, hi):
    if z < lo:
        return lo
    if z > hi:
        return hi
    return z


@njit(cache=True)
def coord_argmin(code, q, r, y, l1, l2, bound, z0):
    # z0: current point, returned when the problem is flat along the coordinate
    if code == CODE_ELASTIC_NET:
        den = q + l2
        if den > 0.0:
            return soft_threshold(r, l1) / den
        return 0.0 if abs(r) <= l1 else z0
    if code == CODE_L1_BOUNDED:
        if q > 0.0:
            z = soft_threshold(r, l1) / q
        elif r > l1:
            z = bound
        elif r < -l1:
            z = -bound
        else:
            z = 0.0
        return _clip(z, -bound, bound)
    if code == CODE_HINGE_DUAL or code == CODE_ABSDEV_DUAL:
        if code == CODE_HINGE_DUAL:
            if y > 0.0:
                lo, hi = 0.0, bound
            else:
                lo, hi = -bound, 0.0
        else:
            lo, hi = -bound, bound
        s = r + y
        if q > 0.0:
            return _clip(s / q, lo, hi)
        if s > 0.0:
            return hi
        if s < 0.0:
            return lo
        return _clip(z0, lo, hi)
    # CODE_SQUARED_DUAL
    return (r + y) / (q + 1.0)


@njit(cache=True)
def coord_argmin_many(code, q, r, y, l1, l2, bound, z0):
    out = np.empty(r.shape[0])
    for j in range(r.shape[0]):
        out[j] = coord_argmin(code, q[j], r[j], y[j], l1, l2, bound, z0[j])
    return out


@njit(cache=True, nogil=True)
def cd_epochs(indptr, indices, data, colsq, order, alpha, delta, dv, w,
              scale, code, y, l1, l2, bound):
    """Coordinate descent on the data-local quadratic subproblem.

    ``scale`` is sigma'/tau. ``delta`` (local update) and ``dv`` (its image
    ``A_[k] delta``) are modified in place; ``order`` lists the coordinates
    visited, local indices into the block.
    """
    for t in range(order.shape[0]):
        i = order[t]
        lo = indptr[i]
        hi = indptr[i + 1]
        xw = 0.0
        xdv = 0.0
        for p in range(lo, hi):
            xw += data[p] * w[indices[p]]
            xdv += data[p] * dv[indices[p]]
        q = scale * colsq[i]
        c = xw + scale * xdv
        a0 = alpha[i] + delta[i]
        r = q * a0 - c
        z = coord_argmin(code, q, r, y[i], l1, l2, bound, a0)
        step = (z - alpha[i]) - delta[i]
        if step != 0.0:
            delta[i] = z - alpha[i]
            for p in range(lo, hi):
                dv[indices[p]] += step * data[p]
    return order.shape[0]


@njit(cache=True, nogil=True)
def cd_absolute(indptr, indices, data, colsq, order, alpha, av, lin,
                quad, code, y, l1, l2, bound):
    """Coordinate descent on ``sum g(alpha) + lin^T A alpha + (quad/2)||A alpha||^2``.

    ``alpha`` and ``av = A alpha`` are updated in place.
    """
    for t in range(order.shape[0]):
        i = order[t]
        lo = indptr[i]
        hi = indptr[i + 1]
        xl = 0.0
        xav = 0.0
        for p in range(lo, hi):
            xl += data[p] * lin[indices[p]]
            xav += data[p] * av[indices[p]]
        q = quad * colsq[i]
        a0 = alpha[i]
        r = q * a0 - (xl + quad * xav)
        z = coord_argmin(code, q, r, y[i], l1, l2, bound, a0)
        step = z - a0
        if step != 0.0:
            alpha[i] = z
            for p in range(lo, hi):
                av[indices[p]] += step * data[p]
    return order.shape[0]
