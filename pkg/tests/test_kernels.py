"""Backend parity and the counter-based RNG contract.

Tree structure must be bit-identical across backends (integer arithmetic);
green values agree to rounding because complex division may differ in the
last ulp.  The sampling kernels are also checked node-for-node against the
pure-Python key derivation in gwgreen._rng.
"""

import numpy as np
import pytest

from gwgreen import backend
from gwgreen._rng import child_key, fold_seed, mix64, root_key, unit_double
from gwgreen.estimates import (label_invariant_permutations, p_weights,
                               two_sphere_index)
from gwgreen.model import (SubstitutionMatrix, deterministic_process,
                           percolation_process)
from gwgreen.trees import sample_tree

try:
    NUMBA = backend.kernel_module("numba")
    HAVE_NUMBA = True
except ImportError:
    HAVE_NUMBA = False
NUMPY = backend.kernel_module("numpy")

needs_numba = pytest.mark.skipif(not HAVE_NUMBA, reason="numba unavailable")

LAWS = [
    percolation_process(2, 0.7),
    percolation_process(3, 0.9),
    deterministic_process(SubstitutionMatrix([[1, 1], [1, 1]])),
]


def sample_with(mod, b, root, depth, seed):
    counts, cum, ptr = b.sampling_tables()
    return mod.sample_tree_kernel(counts, cum, ptr, root, depth,
                                  np.uint64(seed))


def test_fold_seed_and_mix64_basics():
    assert mix64(0) == mix64(0)
    assert fold_seed(1, 2) != fold_seed(2, 1)
    assert fold_seed(0) != fold_seed(0, 0)
    assert 0 <= unit_double(12345) < 1.0


@needs_numba
def test_tree_structure_bitwise_across_backends():
    for seed in range(6):
        for b in LAWS:
            a = sample_with(NUMBA, b, 0, 7, seed)
            c = sample_with(NUMPY, b, 0, 7, seed)
            for x, y in zip(a, c):
                assert x.dtype == y.dtype
                assert np.array_equal(x, y)


def test_sampling_matches_reference_rng():
    # walk the flat tree, rebuild each node's key from its path, and check
    # the drawn configuration against the pure-Python uniform
    b = percolation_process(3, 0.6)
    counts, cum, ptr = b.sampling_tables()
    seed = 987654321
    t = sample_tree(b, 0, 6, seed)
    keys = np.zeros(t.n_nodes, dtype=np.uint64)
    keys[0] = root_key(seed, 0)
    for v in range(t.n_nodes):
        kids = t.children(v)
        for pos, ch in enumerate(kids):
            keys[ch] = child_key(int(keys[v]), pos)
        if kids.size == 0:
            continue
        u = unit_double(int(keys[v]))
        j = int(t.labels[v])
        lo, hi = int(ptr[j]), int(ptr[j + 1])
        pick = int(np.searchsorted(cum[lo:hi], u, side="right"))
        pick = min(pick, hi - lo - 1)
        expect = counts[lo + pick]
        got = np.bincount(t.labels[kids], minlength=b.n_labels)
        assert np.array_equal(got, expect), f"node {v}"


@needs_numba
def test_green_kernels_parity():
    z = np.complex128(1.7 + 0.03j)
    M = SubstitutionMatrix([[1, 1], [1, 1]])
    b = deterministic_process(M)
    det = np.array([0.1 + 0.5j, -0.2 + 0.4j])
    for seed in range(4):
        t = sample_tree(b, 0, 6, seed)
        args = (t.labels, t.child_start, t.child_count, t.depths, z)
        for mode in (0, 1, 2):
            a = NUMBA.truncated_green_kernel(*args, mode, det)
            c = NUMPY.truncated_green_kernel(*args, mode, det)
            np.testing.assert_allclose(a, c, rtol=1e-13)
        fargs = (t.labels, t.parents, t.child_start, t.child_count, t.depths)
        a = NUMBA.full_green_kernel(*fargs, z)
        c = NUMPY.full_green_kernel(*fargs, z)
        np.testing.assert_allclose(a, c, rtol=1e-13)
        a = NUMBA.full_green_tail_kernel(*fargs, z, M.M, det)
        c = NUMPY.full_green_tail_kernel(*fargs, z, M.M, det)
        np.testing.assert_allclose(a, c, rtol=1e-13)


@needs_numba
def test_herglotz_apply_parity():
    M = SubstitutionMatrix([[2, 1], [1, 3]])
    degs = M.degrees()
    z = np.complex128(2.2 + 0.4j)
    x = np.array([0.05 + 0.3j, -0.1 + 0.25j])
    a = NUMBA.herglotz_apply(M.M, degs, z, x)
    c = NUMPY.herglotz_apply(M.M, degs, z, x)
    np.testing.assert_allclose(a, c, rtol=1e-14)
    assert np.all(a.imag > 0)


@needs_numba
def test_kappa_batch_parity():
    M = SubstitutionMatrix([[2]])
    z = np.complex128(3.0 + 0.01j)
    # fixed point of 2 G^2 + (z-3) G + 1 = 0 with Im > 0
    disc = np.sqrt((z - 3.0) ** 2 - 8.0 + 0j)
    det = np.array([(-(z - 3.0) + disc) / 4.0])
    if det[0].imag < 0:
        det = np.array([(-(z - 3.0) - disc) / 4.0])
    idx = two_sphere_index(M, 0)
    perms, _ = label_invariant_permutations(M, 0)
    pj = p_weights(M, det, 0)
    mg = np.complex128(M.M[0].astype(np.complex128) @ det)
    rng = np.random.default_rng(3)
    g = np.empty((256, idx.n_total), dtype=np.complex128)
    g.real = rng.standard_normal(g.shape)
    g.imag = 10.0 ** rng.uniform(-4, 1, g.shape)
    args = (g, perms, idx.labels_all, idx.n_surv, idx.hat_labels,
            idx.surv_to_hat, idx.oprime_slot, det, z, idx.deg_j, mg, pj,
            2.0)
    for damped in (True, False):
        na, da = NUMBA.kappa_batch(*args, damped)
        nb, db = NUMPY.kappa_batch(*args, damped)
        np.testing.assert_allclose(na, nb, rtol=1e-11)
        np.testing.assert_allclose(da, db, rtol=1e-11)


def test_backend_module_selection():
    assert backend.active_backend() in ("numba", "numpy")
    assert backend.kernel_module().sample_tree_kernel is \
        backend.sample_tree_kernel
    with pytest.raises(ValueError):
        backend.kernel_module("fortran")
