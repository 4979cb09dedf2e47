"""Pure-numpy kernel implementations (fallback backend).

Vectorized level-wise, mirroring the numba kernels node-for-node: the RNG is
bit-identical (integer arithmetic), tree arrays come out bitwise equal, and
summations run in the same sequential order (np.add.reduceat accumulates
segments left-to-right).  Complex division may differ from numba in the last
ulp, so green values agree across backends only to rounding, while each
backend is internally exactly self-consistent — in particular
``herglotz_apply`` here is a bitwise fixed-point map for the tree recursions
here.
"""

from __future__ import annotations

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_SALT = np.uint64(0xD1B54A32D192ED03)
_C1 = np.uint64(0xBF58476D1CE4E5B9)
_C2 = np.uint64(0x94D049BB133111EB)
_S30 = np.uint64(30)
_S27 = np.uint64(27)
_S31 = np.uint64(31)
_S11 = np.uint64(11)
_TWO53 = np.float64(2.0 ** -53)
_DEGEN_TOL = 1e-14


def _mix64(x):
    """splitmix64 finalizer, uint64 array in/out."""
    x = x ^ (x >> _S30)
    x = x * _C1
    x = x ^ (x >> _S27)
    x = x * _C2
    x = x ^ (x >> _S31)
    return x


def _unit(keys):
    return (_mix64(keys ^ _SALT) >> _S11).astype(np.float64) * _TWO53


def sample_tree_kernel(cfg_counts, cfg_cum, cfg_ptr, root_label, depth_cut, seed):
    """Sample one tree, BFS layout, children contiguous and label-sorted.

    Returns (labels, parents, child_start, child_count, depths), all int64.
    """
    L = cfg_ptr.size - 1
    seed_u = np.uint64(seed & 0xFFFFFFFFFFFFFFFF)
    rkey = _mix64(_mix64(np.array([seed_u]))
                  + _GOLDEN * np.uint64(root_label + 1))

    lvl_labels = [np.array([root_label], dtype=np.int64)]
    lvl_keys = [rkey]
    lvl_parents = [np.array([-1], dtype=np.int64)]
    lvl_counts = []          # children per node, per level
    offsets = [0]            # global index of each level's first node

    for d in range(depth_cut):
        lab = lvl_labels[d]
        keys = lvl_keys[d]
        n_d = lab.size
        u = _unit(keys)
        cidx = np.empty(n_d, dtype=np.int64)
        for j in np.unique(lab):
            mask = lab == j
            lo, hi = int(cfg_ptr[j]), int(cfg_ptr[j + 1])
            pick = np.searchsorted(cfg_cum[lo:hi], u[mask], side="right")
            cidx[mask] = lo + np.minimum(pick, hi - lo - 1)
        rows = cfg_counts[cidx]                      # (n_d, L)
        row_tot = rows.sum(axis=1)
        lvl_counts.append(row_tot)
        n_next = int(row_tot.sum())
        offsets.append(offsets[-1] + n_d)
        if n_next == 0:
            # only reachable for laws violating the one-child condition
            break
        parent_local = np.repeat(np.arange(n_d, dtype=np.int64), row_tot)
        labels_next = np.repeat(np.tile(np.arange(L, dtype=np.int64), n_d),
                                rows.ravel())
        block_off = np.concatenate(([0], np.cumsum(row_tot)[:-1]))
        pos = np.arange(n_next, dtype=np.int64) - np.repeat(block_off, row_tot)
        keys_next = _mix64(keys[parent_local]
                           + _GOLDEN * (pos + 1).astype(np.uint64))
        lvl_labels.append(labels_next)
        lvl_keys.append(keys_next)
        lvl_parents.append(parent_local + offsets[d])

    n_levels = len(lvl_labels)
    while len(lvl_counts) < n_levels:
        lvl_counts.append(np.zeros(lvl_labels[len(lvl_counts)].size, np.int64))
    if len(offsets) < n_levels + 1:
        offsets.append(offsets[-1] + lvl_labels[-1].size)

    n = offsets[-1]
    labels = np.concatenate(lvl_labels)
    parents = np.concatenate(lvl_parents)
    child_count = np.concatenate(lvl_counts)
    depths = np.concatenate([np.full(lvl_labels[d].size, d, dtype=np.int64)
                             for d in range(n_levels)])
    child_start = np.empty(n, dtype=np.int64)
    for d in range(n_levels):
        lo, hi = offsets[d], offsets[d + 1]
        next_lo = offsets[d + 1] if d + 1 < n_levels else n
        counts = child_count[lo:hi]
        child_start[lo:hi] = next_lo + np.concatenate(([0], np.cumsum(counts)[:-1]))
    return labels, parents, child_start, child_count, depths


def truncated_green_kernel(labels, child_start, child_count, depths,
                           z, boundary_mode, det_values):
    """Backward recursion for truncated green values, level-vectorized.

    boundary_mode: 0 finite-exact (cutoff leaves use the leaf formula),
    1 deterministic (leaves take det_values[label]), 2 constant i.
    """
    n = labels.size
    z = np.complex128(z)
    out = np.empty(n, dtype=np.complex128)
    max_depth = int(depths[-1]) if n else 0
    # depths are nondecreasing in BFS layout
    level_lo = np.searchsorted(depths, np.arange(max_depth + 1), side="left")
    level_hi = np.searchsorted(depths, np.arange(max_depth + 1), side="right")
    for d in range(max_depth, -1, -1):
        lo, hi = int(level_lo[d]), int(level_hi[d])
        cc = child_count[lo:hi]
        sums = np.zeros(hi - lo, dtype=np.complex128)
        internal = cc > 0
        if np.any(internal):
            starts = child_start[lo:hi][internal]
            child_end = int(child_start[hi - 1] + child_count[hi - 1])
            sums[internal] = np.add.reduceat(out[:child_end], starts)
        vals = np.complex128(-1.0) / (z - (cc + 1.0) + sums)
        if boundary_mode != 0:
            leaves = ~internal
            if np.any(leaves):
                if boundary_mode == 1:
                    vals[leaves] = det_values[labels[lo:hi][leaves]]
                else:
                    vals[leaves] = 1j
        out[lo:hi] = vals
    return out


def full_green_kernel(labels, parents, child_start, child_count, depths, z):
    """Diagonal green values of the finite tree (no root boundary term).

    Upward pass collects child-side branch weights W, downward pass the
    parent-side weight; per-node degree is the finite-tree degree.  The
    exclusion sums use subtraction (vectorization); the numba twin re-sums
    exactly, so cross-backend agreement is to rounding, not bitwise.
    """
    n = labels.size
    z = np.complex128(z)
    W = np.empty(n, dtype=np.complex128)
    Wsum = np.empty(n, dtype=np.complex128)   # sum of W over children
    deg = child_count + (parents >= 0)
    max_depth = int(depths[-1]) if n else 0
    level_lo = np.searchsorted(depths, np.arange(max_depth + 1), side="left")
    level_hi = np.searchsorted(depths, np.arange(max_depth + 1), side="right")
    for d in range(max_depth, -1, -1):
        lo, hi = int(level_lo[d]), int(level_hi[d])
        cc = child_count[lo:hi]
        sums = np.zeros(hi - lo, dtype=np.complex128)
        internal = cc > 0
        if np.any(internal):
            starts = child_start[lo:hi][internal]
            child_end = int(child_start[hi - 1] + child_count[hi - 1])
            sums[internal] = np.add.reduceat(W[:child_end], starts)
        Wsum[lo:hi] = sums
        W[lo:hi] = 1.0 / (deg[lo:hi] - z - sums)
    What = np.empty(n, dtype=np.complex128)
    What[0] = 0.0
    for d in range(max_depth):
        lo, hi = int(level_lo[d]), int(level_hi[d])
        cc = child_count[lo:hi]
        internal = np.nonzero(cc > 0)[0] + lo
        if internal.size == 0:
            continue
        # children of node i get 1/(deg_i - z - What_i - (Wsum_i - W_child))
        kids_parent = np.repeat(internal, child_count[internal])
        kid_lo = int(child_start[internal[0]])
        kid_hi = int(child_start[internal[-1]] + child_count[internal[-1]])
        kids = np.arange(kid_lo, kid_hi, dtype=np.int64)
        What[kids] = 1.0 / (deg[kids_parent] - z - What[kids_parent]
                            - (Wsum[kids_parent] - W[kids]))
    return 1.0 / (deg - z - What - Wsum)


def full_green_tail_kernel(labels, parents, child_start, child_count, depths,
                           z, M, det):
    """Diagonal green values with deterministic cones glued at the cutoff.

    Same two passes as full_green_kernel, except childless nodes carry the
    infinite-tree data of their label: branch weight W = det[label], degree
    1 + row sum of M, child-side sum M[label] . det.  Removes the real-axis
    pole structure of the bare finite tree, so values stay comparable to the
    deterministic fixed point as Im z -> 0.
    """
    n = labels.size
    z = np.complex128(z)
    det = np.asarray(det, dtype=np.complex128)
    row_sum = M.sum(axis=1)
    dsum = M.astype(np.complex128) @ det
    W = np.empty(n, dtype=np.complex128)
    Wsum = np.empty(n, dtype=np.complex128)
    deg = child_count + (parents >= 0)
    cut = child_count == 0
    max_depth = int(depths[-1]) if n else 0
    level_lo = np.searchsorted(depths, np.arange(max_depth + 1), side="left")
    level_hi = np.searchsorted(depths, np.arange(max_depth + 1), side="right")
    for d in range(max_depth, -1, -1):
        lo, hi = int(level_lo[d]), int(level_hi[d])
        cc = child_count[lo:hi]
        sums = np.zeros(hi - lo, dtype=np.complex128)
        internal = cc > 0
        if np.any(internal):
            starts = child_start[lo:hi][internal]
            child_end = int(child_start[hi - 1] + child_count[hi - 1])
            sums[internal] = np.add.reduceat(W[:child_end], starts)
        Wsum[lo:hi] = sums
        W[lo:hi] = np.where(cut[lo:hi], det[labels[lo:hi]],
                            1.0 / (deg[lo:hi] - z - sums))
    What = np.empty(n, dtype=np.complex128)
    What[0] = 0.0
    for d in range(max_depth):
        lo, hi = int(level_lo[d]), int(level_hi[d])
        cc = child_count[lo:hi]
        internal = np.nonzero(cc > 0)[0] + lo
        if internal.size == 0:
            continue
        kids_parent = np.repeat(internal, child_count[internal])
        kid_lo = int(child_start[internal[0]])
        kid_hi = int(child_start[internal[-1]] + child_count[internal[-1]])
        kids = np.arange(kid_lo, kid_hi, dtype=np.int64)
        What[kids] = 1.0 / (deg[kids_parent] - z - What[kids_parent]
                            - (Wsum[kids_parent] - W[kids]))
    deg_eff = np.where(cut, 1 + row_sum[labels], deg)
    side = np.where(cut, dsum[labels], Wsum)
    return 1.0 / (deg_eff - z - What - side)


def herglotz_apply(M, degrees, z, values):
    """One application of the finite label system, summation-order matched.

    Sums M[j, k] copies of values[k] in label order through the same ufunc
    segment accumulation the tree kernel uses, so a solved fixed point that is
    bitwise stationary here propagates bitwise through deterministic trees.
    """
    L = values.size
    z = np.complex128(z)
    out = np.empty(L, dtype=np.complex128)
    for j in range(L):
        rep = np.repeat(values, M[j])
        s = np.add.reduceat(rep, np.array([0]))[0] if rep.size else np.complex128(0.0)
        out[j] = np.complex128(-1.0) / (z - degrees[j] + s)
    return out


def _qcos_matrix(u, img, imgamma_lab, gam):
    """Pairwise Q*cos(alpha) over one sphere, for batched samples.

    u: (n_s, m) complex differences g_x - Gamma_{a(x)}; img: (n_s, m) Im g;
    imgamma_lab: (m,) Im Gamma per slot; gam: (n_s, m) gamma values.
    Returns (n_s, m, m) with the degenerate-pair convention applied.
    """
    cross = np.real(u[:, :, None] * np.conj(u[:, None, :]))
    am = 0.5 * (img[:, :, None] * imgamma_lab[None, None, :] * gam[:, None, :]
                + img[:, None, :] * imgamma_lab[None, :, None] * gam[:, :, None])
    ok = (gam[:, :, None] >= _DEGEN_TOL) & (gam[:, None, :] >= _DEGEN_TOL)
    out = np.zeros_like(cross)
    np.divide(cross, am, out=out, where=ok & (am > 0.0))
    return out


def kappa_batch(g_batch, perms, labels_all, n_surv, hat_labels, surv_to_hat,
                oprime_slot, gamma_det, z, deg_j, mgamma_sum, pj, p, damped):
    """Numerator and denominator of kappa for each sample.

    g_batch: (n_s, n_v) complex values over the canonical two-sphere order
    (root-sphere survivors first, then the o'-sphere).  perms: (n_p, n_v)
    label-invariant permutations.  Returns (num, den) arrays of shape (n_s,).
    """
    n_s, n_v = g_batch.shape
    z = np.complex128(z)
    eta = z.imag
    im_det = gamma_det.imag
    num = np.zeros(n_s)
    den = np.zeros(n_s)
    for perm in perms:
        gp = g_batch[:, perm]
        img = gp.imag
        u = gp - gamma_det[labels_all][None, :]
        gam = (u.real ** 2 + u.imag ** 2) / (img * im_det[labels_all][None, :])
        # o'-sphere recursion
        g2 = gp[:, n_surv:]
        s2 = g2.sum(axis=1)
        g_op = -1.0 / (z - deg_j + s2)
        # root sphere with the recursed value spliced in at the o' slot
        n_hat = hat_labels.size
        ghat = np.empty((n_s, n_hat), dtype=np.complex128)
        ghat[:, surv_to_hat] = gp[:, :n_surv]
        ghat[:, oprime_slot] = g_op
        imhat = ghat.imag
        uhat = ghat - gamma_det[hat_labels][None, :]
        gamhat = ((uhat.real ** 2 + uhat.imag ** 2)
                  / (imhat * im_det[hat_labels][None, :]))
        qc_hat = _qcos_matrix(uhat, imhat, im_det[hat_labels], gamhat)
        q_hat = imhat / imhat.sum(axis=1, keepdims=True)
        inner_hat = np.einsum("sxy,sy->sx", qc_hat, q_hat)
        qc2 = _qcos_matrix(u[:, n_surv:], img[:, n_surv:],
                           im_det[labels_all[n_surv:]], gam[:, n_surv:])
        q2 = img[:, n_surv:] / img[:, n_surv:].sum(axis=1, keepdims=True)
        inner2 = np.einsum("sxy,sy->sx", qc2, q2)
        c = np.empty((n_s, n_v))
        c[:, :n_surv] = inner_hat[:, surv_to_hat]
        c_op1 = inner_hat[:, oprime_slot]
        if damped:
            rho = (s2.imag * mgamma_sum.imag) / ((eta + s2.imag)
                                                 * (eta + mgamma_sum.imag))
            c[:, n_surv:] = (rho * c_op1)[:, None] * inner2
        else:
            c[:, n_surv:] = c_op1[:, None] * inner2
        t = (pj[None, :] * c * gam).sum(axis=1)
        num += np.abs(t) ** p
        den += (pj[None, :] * gam ** p).sum(axis=1)
    return num, den
