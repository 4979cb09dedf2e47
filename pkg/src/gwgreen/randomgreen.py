"""Green functions on sampled trees.

Truncated values Gamma_x come from one backward pass of the Moebius
recursion with a uniform effective degree |S_x| + 1 (the forward-subtree
degree plus the rank-one root term).  Full diagonal values G_x use the
two-pass branch-weight algorithm on the finite tree with its true degrees
and no root term.  A sparse LU resolvent solve serves as the oracle.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import backend
from .conegreen import GreenVector
from .halfplane import gamma
from .trees import SampledTree

BOUNDARY_RULES = ("finite-exact", "deterministic", "constant-i")
_NEAR_REAL_ETA = 1e-6
_DET_BAND_FLOOR = 1e-3
_ORACLE_NODE_CAP = 50_000


@dataclass
class GreenField:
    """Per-node Green values on one sampled tree at one z."""

    tree: SampledTree
    z: complex
    boundary: str
    trunc: np.ndarray
    full: np.ndarray | None = None

    def __post_init__(self):
        self.trunc.flags.writeable = False
        if self.full is not None:
            self.full.flags.writeable = False


def _det_array(det_values, z: complex, n_labels: int) -> np.ndarray:
    if isinstance(det_values, GreenVector):
        if abs(det_values.z - z) > 1e-12 * max(1.0, abs(z)):
            raise ValueError("boundary Green vector solved at a different z")
        det = det_values.values
    else:
        det = np.asarray(det_values, dtype=np.complex128)
    if det.shape != (n_labels,):
        raise ValueError("boundary values must be one per label")
    if np.any(det.imag <= 0.0):
        raise ValueError("boundary values must lie in the upper half plane")
    return np.ascontiguousarray(det)


def truncated_green_recursion(tree: SampledTree, z: complex,
                              boundary: str = "deterministic",
                              det_values=None) -> GreenField:
    """Backward Moebius pass for the truncated Green functions.

    Boundary rules at cutoff nodes: "finite-exact" closes the recursion on
    the finite tree itself (cutoff node = childless vertex), making the
    output the exact resolvent diagonal of the truncated tree; "deterministic"
    plants the label-system values det_values; "constant-i" plants i.
    Near-real z is refused except with a deterministic boundary whose values
    are clearly band-interior, since the finite tree has poles on the axis.
    """
    z = complex(z)
    if boundary not in BOUNDARY_RULES:
        raise ValueError(f"unknown boundary rule {boundary!r}")
    mode = BOUNDARY_RULES.index(boundary)
    det = np.zeros(tree.n_labels, dtype=np.complex128)
    if boundary == "deterministic":
        if det_values is None:
            raise ValueError("deterministic boundary needs det_values")
        det = _det_array(det_values, z, tree.n_labels)
    elif det_values is not None:
        raise ValueError("det_values only make sense with the deterministic rule")
    if z.imag <= _NEAR_REAL_ETA:
        if boundary != "deterministic":
            raise ValueError("near-real z needs the deterministic boundary")
        if z.imag < 0.0:
            raise ValueError("z must not lie below the real axis")
        if float(det.imag.min()) < _DET_BAND_FLOOR:
            raise ValueError("near-real z needs band-interior boundary values "
                             f"(min Im >= {_DET_BAND_FLOOR})")
    vals = backend.truncated_green_kernel(tree.labels, tree.child_start,
                                          tree.child_count, tree.depths,
                                          np.complex128(z), mode, det)
    if np.any(vals.imag <= 0.0) or not np.all(np.isfinite(vals.view(np.float64))):
        raise ArithmeticError("recursion left the upper half plane")
    return GreenField(tree=tree, z=z, boundary=boundary, trunc=vals)


def full_green_two_pass(tree: SampledTree, z: complex,
                        boundary: str = "finite-exact", M=None,
                        det_values=None) -> GreenField:
    """Diagonal Green functions on the sampled tree, plus truncated values.

    boundary "finite-exact" (default): resolvent of the bare finite tree,
    true degrees, no root term; this is the mode the dense oracle checks.
    boundary "deterministic": the cone of det_values' label is glued below
    every cutoff vertex, so the values approximate the infinite tree and
    stay regular as Im z -> 0 (the bare finite tree is pure point, and its
    Green functions blow up like 1/Im z near its eigenvalues).  Needs the
    substitution matrix M and det_values as in truncated_green_recursion.
    """
    z = complex(z)
    if boundary not in ("finite-exact", "deterministic"):
        raise ValueError("full-Green boundary must be finite-exact or "
                         "deterministic")
    if boundary == "deterministic":
        det = _det_array(det_values, z, tree.n_labels)
        if M is None:
            raise ValueError("deterministic tails need the substitution matrix")
        if z.imag <= _NEAR_REAL_ETA:
            if z.imag < 0.0:
                raise ValueError("z must not lie below the real axis")
            if float(det.imag.min()) < _DET_BAND_FLOOR:
                raise ValueError("near-real z needs band-interior boundary "
                                 f"values (min Im >= {_DET_BAND_FLOOR})")
        trunc = backend.truncated_green_kernel(tree.labels, tree.child_start,
                                               tree.child_count, tree.depths,
                                               np.complex128(z), 1, det)
        full = backend.full_green_tail_kernel(tree.labels, tree.parents,
                                              tree.child_start,
                                              tree.child_count, tree.depths,
                                              np.complex128(z), M.M, det)
    else:
        if not (z.imag > 0.0):
            raise ValueError("full Green functions need Im z > 0")
        trunc = backend.truncated_green_kernel(tree.labels, tree.child_start,
                                               tree.child_count, tree.depths,
                                               np.complex128(z), 0,
                                               np.zeros(tree.n_labels,
                                                        np.complex128))
        full = backend.full_green_kernel(tree.labels, tree.parents,
                                         tree.child_start, tree.child_count,
                                         tree.depths, np.complex128(z))
    bad = (np.any(full.imag <= 0.0) or np.any(trunc.imag <= 0.0)
           or not np.all(np.isfinite(full.view(np.float64))))
    if bad:
        raise ArithmeticError("two-pass recursion left the upper half plane")
    return GreenField(tree=tree, z=z, boundary=boundary,
                      trunc=trunc, full=full)


def dense_resolvent_oracle(tree: SampledTree, z: complex,
                           with_beta_at_root: bool,
                           vertices=None) -> np.ndarray:
    """Diagonal resolvent entries by sparse LU on the tree Laplacian.

    The operator is D - A (+1 at the root when with_beta_at_root), D the
    finite-tree degrees.  Returns (operator - z)^{-1}[v, v] for each
    requested vertex (all by default).
    """
    n = tree.n_nodes
    if n > _ORACLE_NODE_CAP:
        raise ValueError("tree too large for the resolvent oracle")
    z = complex(z)
    deg = tree.child_count + (tree.parents >= 0)
    diag = deg.astype(np.complex128)
    if with_beta_at_root:
        diag[0] += 1.0
    diag -= z
    kids = np.nonzero(tree.parents >= 0)[0]
    pars = tree.parents[kids]
    rows = np.concatenate([np.arange(n), kids, pars])
    cols = np.concatenate([np.arange(n), pars, kids])
    data = np.concatenate([diag, -np.ones(kids.size, np.complex128),
                           -np.ones(kids.size, np.complex128)])
    A = sp.csc_matrix((data, (rows, cols)), shape=(n, n))
    try:
        lu = spla.splu(A)
    except RuntimeError as exc:
        raise ArithmeticError(f"resolvent solve failed (z on the spectrum?): {exc}")
    if vertices is None:
        vertices = range(n)
    out = np.empty(len(vertices), dtype=np.complex128)
    e = np.zeros(n, dtype=np.complex128)
    for i, v in enumerate(vertices):
        e[v] = 1.0
        x = lu.solve(e)
        if not np.all(np.isfinite(x.view(np.float64))):
            raise ArithmeticError("resolvent solve failed (singular system)")
        out[i] = x[v]
        e[v] = 0.0
    return out


def gamma_to_deterministic(field: GreenField, det_values,
                           which: str | None = None) -> np.ndarray:
    """Per-node distance gamma(value_x, Gamma_det[label(x)]).

    which selects the compared field: "trunc", "full", or None for full when
    present, truncated otherwise.
    """
    det = _det_array(det_values, field.z, field.tree.n_labels)
    if which is None:
        which = "full" if field.full is not None else "trunc"
    if which == "trunc":
        vals = field.trunc
    elif which == "full":
        if field.full is None:
            raise ValueError("field carries no full Green values")
        vals = field.full
    else:
        raise ValueError("which must be 'trunc' or 'full'")
    return gamma(vals, det[field.tree.labels])


def validate_green_field(field: GreenField, tol: float = 1e-12) -> dict:
    """Herglotz, modulus, and recursion-residual checks; returns a report
    dict with the worst offenders."""
    tree = field.tree
    z = field.z
    vals = field.trunc
    report = {"min_im": float(vals.imag.min())}
    if z.imag > 0.0:
        report["max_mod_excess"] = float(np.max(np.abs(vals) - 1.0 / z.imag))
    else:
        report["max_mod_excess"] = float("-inf")
    resid = 0.0
    for v in range(tree.n_nodes):
        if tree.is_cutoff(v):
            continue
        kids = tree.children(v)
        s = vals[kids].sum()
        d = tree.child_count[v] + 1
        resid = max(resid, abs(vals[v] + 1.0 / (z - d + s)))
    report["max_residual"] = float(resid)
    report["ok"] = (report["min_im"] > 0.0 and report["max_mod_excess"] <= 1e-9
                    and resid <= tol)
    return report


def _mixed_laws():
    from .model import (BranchingProcess, SubstitutionMatrix,
                        deterministic_process, percolation_process)
    M2 = SubstitutionMatrix([[2]])
    M11 = SubstitutionMatrix([[1, 1], [1, 1]])
    two_label = BranchingProcess(2, [
        [([1, 1], 0.6), ([2, 1], 0.25), ([0, 1], 0.15)],
        [([1, 1], 0.5), ([1, 2], 0.3), ([1, 0], 0.2)],
    ])
    return [
        ("deterministic [[2]]", M2, deterministic_process(M2)),
        ("percolation(2, 0.7)", SubstitutionMatrix([[2]]),
         percolation_process(2, 0.7)),
        ("percolation(3, 0.85)", SubstitutionMatrix([[3]]),
         percolation_process(3, 0.85)),
        ("deterministic [[1,1],[1,1]]", M11, deterministic_process(M11)),
        ("two-label mixed", M11, two_label),
    ]


def oracle_sweep(n_trees: int = 50, depth: int = 6, seed: int = 0,
                 tol: float = 1e-10) -> dict:
    """Recursions vs dense resolvent over random trees from mixed laws.

    Per tree: the full two-pass against the bare dense diagonal at every
    vertex, and the truncated values at every vertex against the rooted
    (+1 boundary term) dense diagonal of that vertex's forward subtree.
    Returns the worst relative errors.
    """
    from ._rng import fold_seed
    from .trees import sample_tree, subtree
    laws = _mixed_laws()
    rng = np.random.default_rng(seed)
    worst_trunc = 0.0
    worst_full = 0.0
    per_tree = []
    for i in range(n_trees):
        name, M, b = laws[i % len(laws)]
        d = 2 + int(rng.integers(depth - 1))
        root = int(rng.integers(b.n_labels))
        E = float(rng.uniform(-2.0, 8.0))
        eta = float(10.0 ** rng.uniform(-3, 0.5))
        z = complex(E, eta)
        t = sample_tree(b, root, d, fold_seed(seed, i))
        f = full_green_two_pass(t, z)
        dense_full = dense_resolvent_oracle(t, z, with_beta_at_root=False)
        err_full = float(np.max(np.abs(f.full - dense_full)
                                / np.abs(dense_full)))
        err_trunc = 0.0
        for x in range(t.n_nodes):
            sub = t if x == 0 else subtree(t, x)
            ref = dense_resolvent_oracle(sub, z, with_beta_at_root=True,
                                         vertices=[0])[0]
            err_trunc = max(err_trunc, float(abs(f.trunc[x] - ref)
                                             / abs(ref)))
        worst_full = max(worst_full, err_full)
        worst_trunc = max(worst_trunc, err_trunc)
        per_tree.append({"tree": i, "law": name, "depth": d,
                         "nodes": t.n_nodes, "z": [z.real, z.imag],
                         "err_trunc": err_trunc, "err_full": err_full})
    return {"n_trees": n_trees, "max_err_trunc": worst_trunc,
            "max_err_full": worst_full, "tol": tol,
            "ok": worst_trunc <= tol and worst_full <= tol,
            "per_tree": per_tree}
