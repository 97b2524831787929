"""Batched numba kernels: energies and analytic forces.

Every kernel takes positions of shape (B, N, 3) and returns ``(E, F)`` with
``E`` of shape (B,) and ``F = -dE/dx`` of shape (B, N, 3).  ``edge <= 0``
means free space.  Each configuration is processed by a single thread with a
fixed loop order, so results do not depend on the thread count.
"""

import numba
import numpy as np
from numba import njit, prange

# the bundled TBB is too old and only produces a warning
numba.config.THREADING_LAYER_PRIORITY = ["omp", "workqueue", "tbb"]

_JIT = dict(cache=True, error_model="numpy", fastmath=False)


@njit(inline="always")
def _wrap(d, edge):
    if edge > 0.0:
        return d - edge * np.ceil(d / edge - 0.5)
    return d


@njit(parallel=True, **_JIT)
def lennard_jones(pos, edge, eps, d0):
    nb, n, _ = pos.shape
    energy = np.zeros(nb)
    force = np.zeros_like(pos)
    d02 = d0 * d0
    for b in prange(nb):
        e = 0.0
        for i in range(n):
            for j in range(i + 1, n):
                dx = _wrap(pos[b, j, 0] - pos[b, i, 0], edge)
                dy = _wrap(pos[b, j, 1] - pos[b, i, 1], edge)
                dz = _wrap(pos[b, j, 2] - pos[b, i, 2], edge)
                r2 = dx * dx + dy * dy + dz * dz
                s2 = d02 / r2
                s6 = s2 * s2 * s2
                s12 = s6 * s6
                e += eps * (s12 - 2.0 * s6)
                # (dE/dr) / r
                g = 12.0 * eps * (s6 - s12) / r2
                force[b, j, 0] -= g * dx
                force[b, j, 1] -= g * dy
                force[b, j, 2] -= g * dz
                force[b, i, 0] += g * dx
                force[b, i, 1] += g * dy
                force[b, i, 2] += g * dz
        energy[b] = e
    return energy, force


@njit(parallel=True, **_JIT)
def soft_sphere(pos, edge, eps, alpha, sigma):
    nb, n, _ = pos.shape
    energy = np.zeros(nb)
    force = np.zeros_like(pos)
    for b in prange(nb):
        e = 0.0
        for i in range(n):
            for j in range(i + 1, n):
                dx = _wrap(pos[b, j, 0] - pos[b, i, 0], edge)
                dy = _wrap(pos[b, j, 1] - pos[b, i, 1], edge)
                dz = _wrap(pos[b, j, 2] - pos[b, i, 2], edge)
                r = np.sqrt(dx * dx + dy * dy + dz * dz)
                if r >= sigma:
                    continue
                overlap = 1.0 - r / sigma
                e += eps * overlap**alpha / alpha
                if r > 0.0:
                    g = -(eps / sigma) * overlap ** (alpha - 1.0) / r
                    force[b, j, 0] -= g * dx
                    force[b, j, 1] -= g * dy
                    force[b, j, 2] -= g * dz
                    force[b, i, 0] += g * dx
                    force[b, i, 1] += g * dy
                    force[b, i, 2] += g * dz
        energy[b] = e
    return energy, force


@njit(parallel=True, **_JIT)
def gupta(pos, edge, species, p, q, d0, rep, xi):
    """Second-moment tight-binding energy, per-atom sums over all j != i.

    E = sum_i [ sum_{j!=i} A exp(p(1 - r/d0)) - sqrt(sum_{j!=i} xi^2 exp(2q(1 - r/d0))) ]
    """
    nb, n, _ = pos.shape
    energy = np.zeros(nb)
    force = np.zeros_like(pos)
    for b in prange(nb):
        dist = np.empty((n, n))
        rho = np.zeros(n)
        e = 0.0
        for i in range(n):
            for j in range(i + 1, n):
                dx = _wrap(pos[b, j, 0] - pos[b, i, 0], edge)
                dy = _wrap(pos[b, j, 1] - pos[b, i, 1], edge)
                dz = _wrap(pos[b, j, 2] - pos[b, i, 2], edge)
                r = np.sqrt(dx * dx + dy * dy + dz * dz)
                dist[i, j] = r
                si = species[i]
                sj = species[j]
                x = 1.0 - r / d0[si, sj]
                e += 2.0 * rep[si, sj] * np.exp(p[si, sj] * x)
                att = xi[si, sj] ** 2 * np.exp(2.0 * q[si, sj] * x)
                rho[i] += att
                rho[j] += att
        for i in range(n):
            e -= np.sqrt(rho[i])
        energy[b] = e
        for i in range(n):
            for j in range(i + 1, n):
                dx = _wrap(pos[b, j, 0] - pos[b, i, 0], edge)
                dy = _wrap(pos[b, j, 1] - pos[b, i, 1], edge)
                dz = _wrap(pos[b, j, 2] - pos[b, i, 2], edge)
                r = dist[i, j]
                si = species[i]
                sj = species[j]
                r0 = d0[si, sj]
                x = 1.0 - r / r0
                drep = -2.0 * rep[si, sj] * p[si, sj] / r0 * np.exp(p[si, sj] * x)
                datt = -2.0 * q[si, sj] / r0 * xi[si, sj] ** 2 * np.exp(2.0 * q[si, sj] * x)
                w = 0.0
                if rho[i] > 0.0:
                    w += 0.5 / np.sqrt(rho[i])
                if rho[j] > 0.0:
                    w += 0.5 / np.sqrt(rho[j])
                g = (drep - w * datt) / r
                force[b, j, 0] -= g * dx
                force[b, j, 1] -= g * dy
                force[b, j, 2] -= g * dz
                force[b, i, 0] += g * dx
                force[b, i, 1] += g * dy
                force[b, i, 2] += g * dz
    return energy, force


@njit(parallel=True, **_JIT)
def stillinger_weber(pos, edge, big_a, eps, big_b, p, q, lam, gam, sigma, a, cos0, rcut):
    """Two-body plus three-body (angle centred on i) Stillinger-Weber energy."""
    nb, n, _ = pos.shape
    energy = np.zeros(nb)
    force = np.zeros_like(pos)
    asig = a * sigma
    rc = min(rcut, asig)
    for b in prange(nb):
        count = np.zeros(n, np.int64)
        nbr = np.empty((n, n), np.int64)
        vec = np.empty((n, n, 3))
        rad = np.empty((n, n))
        e = 0.0
        for i in range(n):
            for j in range(i + 1, n):
                dx = _wrap(pos[b, j, 0] - pos[b, i, 0], edge)
                dy = _wrap(pos[b, j, 1] - pos[b, i, 1], edge)
                dz = _wrap(pos[b, j, 2] - pos[b, i, 2], edge)
                r = np.sqrt(dx * dx + dy * dy + dz * dz)
                if r >= rc:
                    continue
                ci = count[i]
                nbr[i, ci] = j
                vec[i, ci, 0] = dx
                vec[i, ci, 1] = dy
                vec[i, ci, 2] = dz
                rad[i, ci] = r
                count[i] = ci + 1
                cj = count[j]
                nbr[j, cj] = i
                vec[j, cj, 0] = -dx
                vec[j, cj, 1] = -dy
                vec[j, cj, 2] = -dz
                rad[j, cj] = r
                count[j] = cj + 1
                # pair term
                sr = sigma / r
                cut = np.exp(sigma / (r - asig))
                poly = big_b * sr**p - sr**q
                phi = big_a * eps * poly * cut
                e += phi
                dpoly = (-p * big_b * sr**p + q * sr**q) / r
                dphi = big_a * eps * dpoly * cut - phi * sigma / (r - asig) ** 2
                g = dphi / r
                force[b, j, 0] -= g * dx
                force[b, j, 1] -= g * dy
                force[b, j, 2] -= g * dz
                force[b, i, 0] += g * dx
                force[b, i, 1] += g * dy
                force[b, i, 2] += g * dz
        for i in range(n):
            for u in range(count[i]):
                ru = rad[i, u]
                ux = vec[i, u, 0]
                uy = vec[i, u, 1]
                uz = vec[i, u, 2]
                eu = np.exp(gam * sigma / (ru - asig))
                deu = -gam * sigma / (ru - asig) ** 2
                for v in range(u + 1, count[i]):
                    rv = rad[i, v]
                    vx = vec[i, v, 0]
                    vy = vec[i, v, 1]
                    vz = vec[i, v, 2]
                    ev = np.exp(gam * sigma / (rv - asig))
                    dev = -gam * sigma / (rv - asig) ** 2
                    c = (ux * vx + uy * vy + uz * vz) / (ru * rv)
                    delta = c - cos0
                    pref = lam * eps * eu * ev
                    h = pref * delta * delta
                    e += h
                    # dh/du and dh/dv as vectors
                    k1 = 2.0 * pref * delta
                    cu = k1 / (ru * rv)
                    cuu = -k1 * c / (ru * ru) + h * deu / ru
                    cvv = -k1 * c / (rv * rv) + h * dev / rv
                    gux = cu * vx + cuu * ux
                    guy = cu * vy + cuu * uy
                    guz = cu * vz + cuu * uz
                    gvx = cu * ux + cvv * vx
                    gvy = cu * uy + cvv * vy
                    gvz = cu * uz + cvv * vz
                    j = nbr[i, u]
                    k = nbr[i, v]
                    force[b, j, 0] -= gux
                    force[b, j, 1] -= guy
                    force[b, j, 2] -= guz
                    force[b, k, 0] -= gvx
                    force[b, k, 1] -= gvy
                    force[b, k, 2] -= gvz
                    force[b, i, 0] += gux + gvx
                    force[b, i, 1] += guy + gvy
                    force[b, i, 2] += guz + gvz
        energy[b] = e
    return energy, force


@njit(parallel=True, **_JIT)
def radial_symmetry(pos, edge, channel, n_channels, etas, cutoff):
    """Gaussian radial descriptors with a cosine cutoff, shape (B, N, C*len(etas)).

    Column ``c * len(etas) + k`` sums neighbours of channel ``c`` at width ``etas[k]``.
    """
    nb, n, _ = pos.shape
    ne = etas.shape[0]
    out = np.zeros((nb, n, n_channels * ne))
    for b in prange(nb):
        for i in range(n):
            for j in range(i + 1, n):
                dx = _wrap(pos[b, j, 0] - pos[b, i, 0], edge)
                dy = _wrap(pos[b, j, 1] - pos[b, i, 1], edge)
                dz = _wrap(pos[b, j, 2] - pos[b, i, 2], edge)
                r2 = dx * dx + dy * dy + dz * dz
                r = np.sqrt(r2)
                if r > cutoff:
                    continue
                fc = 0.5 * (np.cos(np.pi * r / cutoff) + 1.0)
                ci = channel[i] * ne
                cj = channel[j] * ne
                for k in range(ne):
                    w = np.exp(-etas[k] * r2) * fc
                    out[b, i, cj + k] += w
                    out[b, j, ci + k] += w
    return out


@njit(parallel=True, **_JIT)
def logmag_pairs(x, p):
    """Row-wise log-magnitude expansion (M, K) -> (M, 2K), pairs adjacent."""
    m, k = x.shape
    out = np.empty((m, 2 * k))
    thr = np.exp(-p)
    scale = np.exp(p)
    for i in prange(m):
        for c in range(k):
            v = x[i, c]
            a = abs(v)
            if a > thr:
                out[i, 2 * c] = np.log(a) / p
                out[i, 2 * c + 1] = 1.0 if v > 0 else -1.0
            else:
                out[i, 2 * c] = -1.0
                out[i, 2 * c + 1] = v * scale
    return out
