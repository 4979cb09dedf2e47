"""Numba kernel implementations (default backend).

Node-for-node twins of the numpy fallback: identical integer RNG (bitwise),
identical summation order.  Complex division is numba's own, so green values
agree with the fallback to rounding while staying exactly self-consistent
within this backend (herglotz_apply here is the bitwise fixed-point map for
the tree recursions here).

All kernels are cached and release the GIL, so thread pools get real
parallelism over independent samples.
"""

from __future__ import annotations

import numpy as np
from numba import njit

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_SALT = np.uint64(0xD1B54A32D192ED03)
_C1 = np.uint64(0xBF58476D1CE4E5B9)
_C2 = np.uint64(0x94D049BB133111EB)
_DEGEN_TOL = 1e-14


@njit(cache=True, nogil=True, inline="always")
def _mix64(x):
    x ^= x >> np.uint64(30)
    x *= _C1
    x ^= x >> np.uint64(27)
    x *= _C2
    x ^= x >> np.uint64(31)
    return x


@njit(cache=True, nogil=True, inline="always")
def _unit(key):
    return np.float64(_mix64(key ^ _SALT) >> np.uint64(11)) * (2.0 ** -53)


@njit(cache=True, nogil=True)
def sample_tree_kernel(cfg_counts, cfg_cum, cfg_ptr, root_label, depth_cut, seed):
    """Sample one tree, BFS layout, children contiguous and label-sorted."""
    L = cfg_ptr.size - 1
    cap = 256
    labels = np.empty(cap, np.int64)
    parents = np.empty(cap, np.int64)
    child_start = np.empty(cap, np.int64)
    child_count = np.empty(cap, np.int64)
    depths = np.empty(cap, np.int64)
    keys = np.empty(cap, np.uint64)

    labels[0] = root_label
    parents[0] = -1
    depths[0] = 0
    keys[0] = _mix64(_mix64(np.uint64(seed)) + _GOLDEN * np.uint64(root_label + 1))
    n = 1
    read = 0
    while read < n:
        node = read
        read += 1
        child_start[node] = n
        if depths[node] >= depth_cut:
            child_count[node] = 0
            continue
        u = _unit(keys[node])
        lo = cfg_ptr[labels[node]]
        hi = cfg_ptr[labels[node] + 1]
        c = lo
        while c < hi - 1 and u >= cfg_cum[c]:
            c += 1
        total = 0
        for k in range(L):
            total += cfg_counts[c, k]
        child_count[node] = total
        if n + total > cap:
            new_cap = cap
            while n + total > new_cap:
                new_cap *= 2
            nl = np.empty(new_cap, np.int64); nl[:n] = labels[:n]; labels = nl
            npar = np.empty(new_cap, np.int64); npar[:n] = parents[:n]; parents = npar
            ns = np.empty(new_cap, np.int64); ns[:n] = child_start[:n]; child_start = ns
            nc = np.empty(new_cap, np.int64); nc[:n] = child_count[:n]; child_count = nc
            nd = np.empty(new_cap, np.int64); nd[:n] = depths[:n]; depths = nd
            nk = np.empty(new_cap, np.uint64); nk[:n] = keys[:n]; keys = nk
            cap = new_cap
        pos = 0
        for k in range(L):
            for _r in range(cfg_counts[c, k]):
                labels[n] = k
                parents[n] = node
                depths[n] = depths[node] + 1
                keys[n] = _mix64(keys[node] + _GOLDEN * np.uint64(pos + 1))
                n += 1
                pos += 1
    return (labels[:n].copy(), parents[:n].copy(), child_start[:n].copy(),
            child_count[:n].copy(), depths[:n].copy())


@njit(cache=True, nogil=True)
def truncated_green_kernel(labels, child_start, child_count, depths,
                           z, boundary_mode, det_values):
    """Backward recursion for truncated green values.

    boundary_mode: 0 finite-exact, 1 deterministic leaves, 2 constant i.
    Children precede nothing: BFS layout guarantees child index > parent
    index, so one reverse sweep suffices.
    """
    n = labels.size
    out = np.empty(n, dtype=np.complex128)
    for i in range(n - 1, -1, -1):
        cc = child_count[i]
        if cc == 0 and boundary_mode != 0:
            if boundary_mode == 1:
                out[i] = det_values[labels[i]]
            else:
                out[i] = 1j
        else:
            s = 0.0 + 0.0j
            st = child_start[i]
            for c in range(st, st + cc):
                s += out[c]
            out[i] = -1.0 / (z - (cc + 1.0) + s)
    return out


@njit(cache=True, nogil=True)
def full_green_kernel(labels, parents, child_start, child_count, depths, z):
    """Diagonal green values of the finite tree (no root boundary term).

    Exclusion sums are recomputed exactly per child (degrees are small), not
    by subtraction.
    """
    n = labels.size
    W = np.empty(n, dtype=np.complex128)
    Wsum = np.empty(n, dtype=np.complex128)
    for i in range(n - 1, -1, -1):
        s = 0.0 + 0.0j
        st = child_start[i]
        for c in range(st, st + child_count[i]):
            s += W[c]
        Wsum[i] = s
        deg_i = child_count[i] + (1 if parents[i] >= 0 else 0)
        W[i] = 1.0 / (deg_i - z - s)
    What = np.empty(n, dtype=np.complex128)
    What[0] = 0.0 + 0.0j
    G = np.empty(n, dtype=np.complex128)
    for i in range(n):
        deg_i = child_count[i] + (1 if parents[i] >= 0 else 0)
        G[i] = 1.0 / (deg_i - z - What[i] - Wsum[i])
        st = child_start[i]
        cc = child_count[i]
        for c in range(st, st + cc):
            excl = 0.0 + 0.0j
            for c2 in range(st, st + cc):
                if c2 != c:
                    excl += W[c2]
            What[c] = 1.0 / (deg_i - z - What[i] - excl)
    return G


@njit(cache=True, nogil=True)
def full_green_tail_kernel(labels, parents, child_start, child_count, depths,
                           z, M, det):
    """Diagonal green values with deterministic cones glued at the cutoff.

    Childless nodes carry the infinite-tree data of their label: branch
    weight W = det[label], degree 1 + row sum of M, child-side sum
    M[label] . det.
    """
    n = labels.size
    L = det.size
    row_sum = np.empty(L, dtype=np.int64)
    dsum = np.empty(L, dtype=np.complex128)
    for l in range(L):
        rs = 0
        s = 0.0 + 0.0j
        for k in range(L):
            rs += M[l, k]
            v = det[k]
            for _r in range(M[l, k]):
                s += v
        row_sum[l] = rs
        dsum[l] = s
    W = np.empty(n, dtype=np.complex128)
    Wsum = np.empty(n, dtype=np.complex128)
    for i in range(n - 1, -1, -1):
        s = 0.0 + 0.0j
        st = child_start[i]
        for c in range(st, st + child_count[i]):
            s += W[c]
        Wsum[i] = s
        if child_count[i] == 0:
            W[i] = det[labels[i]]
        else:
            deg_i = child_count[i] + (1 if parents[i] >= 0 else 0)
            W[i] = 1.0 / (deg_i - z - s)
    What = np.empty(n, dtype=np.complex128)
    What[0] = 0.0 + 0.0j
    G = np.empty(n, dtype=np.complex128)
    for i in range(n):
        if child_count[i] == 0:
            lab = labels[i]
            G[i] = 1.0 / ((1 + row_sum[lab]) - z - What[i] - dsum[lab])
            continue
        deg_i = child_count[i] + (1 if parents[i] >= 0 else 0)
        G[i] = 1.0 / (deg_i - z - What[i] - Wsum[i])
        st = child_start[i]
        cc = child_count[i]
        for c in range(st, st + cc):
            excl = 0.0 + 0.0j
            for c2 in range(st, st + cc):
                if c2 != c:
                    excl += W[c2]
            What[c] = 1.0 / (deg_i - z - What[i] - excl)
    return G


@njit(cache=True, nogil=True)
def herglotz_apply(M, degrees, z, values):
    """One application of the finite label system, summation-order matched
    to the tree recursion (label-sorted sequential repeated addition)."""
    L = values.size
    out = np.empty(L, dtype=np.complex128)
    for j in range(L):
        s = 0.0 + 0.0j
        for k in range(L):
            v = values[k]
            for _r in range(M[j, k]):
                s += v
        out[j] = -1.0 / (z - degrees[j] + s)
    return out


@njit(cache=True, nogil=True)
def kappa_batch(g_batch, perms, labels_all, n_surv, hat_labels, surv_to_hat,
                oprime_slot, gamma_det, z, deg_j, mgamma_sum, pj, p, damped):
    """Numerator and denominator of kappa for each sample; see the numpy twin
    for the layout contract."""
    n_s, n_v = g_batch.shape
    n_p = perms.shape[0]
    n_hat = hat_labels.size
    n_op = n_v - n_surv
    eta = z.imag
    num = np.zeros(n_s)
    den = np.zeros(n_s)
    gp = np.empty(n_v, dtype=np.complex128)
    u = np.empty(n_v, dtype=np.complex128)
    gam = np.empty(n_v)
    ghat = np.empty(n_hat, dtype=np.complex128)
    uhat = np.empty(n_hat, dtype=np.complex128)
    gamhat = np.empty(n_hat)
    inner_hat = np.empty(n_hat)
    inner2 = np.empty(n_op)
    c = np.empty(n_v)
    im_mg = mgamma_sum.imag
    for s_i in range(n_s):
        for p_i in range(n_p):
            for v in range(n_v):
                gp[v] = g_batch[s_i, perms[p_i, v]]
                d = gp[v] - gamma_det[labels_all[v]]
                u[v] = d
                gam[v] = ((d.real * d.real + d.imag * d.imag)
                          / (gp[v].imag * gamma_det[labels_all[v]].imag))
            s2 = 0.0 + 0.0j
            for v in range(n_surv, n_v):
                s2 += gp[v]
            g_op = -1.0 / (z - deg_j + s2)
            for i in range(n_surv):
                ghat[surv_to_hat[i]] = gp[i]
            ghat[oprime_slot] = g_op
            im_sum_hat = 0.0
            for t in range(n_hat):
                d = ghat[t] - gamma_det[hat_labels[t]]
                uhat[t] = d
                gamhat[t] = ((d.real * d.real + d.imag * d.imag)
                             / (ghat[t].imag * gamma_det[hat_labels[t]].imag))
                im_sum_hat += ghat[t].imag
            # anchored averages over the root sphere (values ghat)
            for t in range(n_hat):
                acc = 0.0
                if gamhat[t] >= _DEGEN_TOL:
                    im_t = gamma_det[hat_labels[t]].imag
                    for y in range(n_hat):
                        if y == t:
                            acc += ghat[y].imag
                            continue
                        if gamhat[y] < _DEGEN_TOL:
                            continue
                        am = 0.5 * (ghat[t].imag * gamma_det[hat_labels[y]].imag
                                    * gamhat[y]
                                    + ghat[y].imag * im_t * gamhat[t])
                        if am > 0.0:
                            cross = (uhat[t].real * uhat[y].real
                                     + uhat[t].imag * uhat[y].imag)
                            acc += ghat[y].imag * cross / am
                inner_hat[t] = acc / im_sum_hat
            # anchored averages over the o' sphere (values gp[n_surv:])
            im_sum2 = 0.0
            for y in range(n_surv, n_v):
                im_sum2 += gp[y].imag
            for xi in range(n_op):
                x = n_surv + xi
                acc = 0.0
                if gam[x] >= _DEGEN_TOL:
                    im_x = gamma_det[labels_all[x]].imag
                    for yi in range(n_op):
                        y = n_surv + yi
                        if y == x:
                            acc += gp[y].imag
                            continue
                        if gam[y] < _DEGEN_TOL:
                            continue
                        am = 0.5 * (gp[x].imag * gamma_det[labels_all[y]].imag
                                    * gam[y]
                                    + gp[y].imag * im_x * gam[x])
                        if am > 0.0:
                            cross = (u[x].real * u[y].real
                                     + u[x].imag * u[y].imag)
                            acc += gp[y].imag * cross / am
                inner2[xi] = acc / im_sum2
            for i in range(n_surv):
                c[i] = inner_hat[surv_to_hat[i]]
            c_op1 = inner_hat[oprime_slot]
            scale = c_op1
            if damped:
                rho = ((s2.imag * im_mg)
                       / ((eta + s2.imag) * (eta + im_mg)))
                scale = rho * c_op1
            for xi in range(n_op):
                c[n_surv + xi] = scale * inner2[xi]
            t_sum = 0.0
            d_sum = 0.0
            for v in range(n_v):
                t_sum += pj[v] * c[v] * gam[v]
                d_sum += pj[v] * gam[v] ** p
            num[s_i] += abs(t_sum) ** p
            den[s_i] += d_sum
    return num, den
