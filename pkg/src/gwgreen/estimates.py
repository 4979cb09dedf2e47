"""Contraction machinery on the two-sphere of the deterministic tree.

Everything here lives on the index set S(T_j): the root sphere of a label-j
vertex minus the distinguished same-label child o', plus the forward sphere
of o'.  Vertices are indexed canonically (root-sphere survivors label-sorted
first, then the o'-sphere label-sorted), which fixes permutations, weights,
and the batched kernel layout once and for all.
"""

from __future__ import annotations

import csv
import itertools
import json
import math
from dataclasses import dataclass

import numpy as np

from . import backend
from ._parallel import run_indexed
from ._rng import fold_seed
from .conegreen import GreenVector, detect_bands, solve_green
from .halfplane import gamma, mobius_step
from .model import SubstitutionMatrix

DEGENERACY_TOL = 1e-14
PERM_CAP = 10_000


@dataclass(frozen=True)
class TwoSphereIndex:
    """Canonical vertex bookkeeping for S(T_j).

    labels_all = survivors then o'-sphere; hat_labels is the full root
    sphere (survivors plus o') in label order, with o' at the first
    label-j slot; surv_to_hat embeds survivor i into the hat sphere.
    """

    j: int
    labels_all: np.ndarray
    hat_labels: np.ndarray
    surv_to_hat: np.ndarray
    oprime_slot: int
    n_surv: int
    deg_j: float

    @property
    def n_total(self) -> int:
        return int(self.labels_all.size)

    @property
    def n_op(self) -> int:
        return self.n_total - self.n_surv


def two_sphere_index(M: SubstitutionMatrix, j: int) -> TwoSphereIndex:
    if not (0 <= j < M.L):
        raise ValueError("label out of range")
    row = M.M[j]
    hat_labels = np.repeat(np.arange(M.L, dtype=np.int64), row)
    oprime_slot = int(np.searchsorted(hat_labels, j, side="left"))
    surv_to_hat = np.concatenate([np.arange(oprime_slot, dtype=np.int64),
                                  np.arange(oprime_slot + 1, hat_labels.size,
                                            dtype=np.int64)])
    labels_surv = hat_labels[surv_to_hat]
    labels_all = np.concatenate([labels_surv, hat_labels])
    for arr in (labels_all, hat_labels, surv_to_hat):
        arr.flags.writeable = False
    return TwoSphereIndex(j=j, labels_all=labels_all, hat_labels=hat_labels,
                          surv_to_hat=surv_to_hat, oprime_slot=oprime_slot,
                          n_surv=int(labels_surv.size),
                          deg_j=float(M.degrees()[j]))


@dataclass
class SphereAssignment:
    """Values g_x in the upper half plane over the canonical S(T_j) order."""

    index: TwoSphereIndex
    g: np.ndarray

    def __post_init__(self):
        self.g = np.ascontiguousarray(self.g, dtype=np.complex128)
        if self.g.shape != (self.index.n_total,):
            raise ValueError("one value per S(T_j) vertex required")
        if np.any(self.g.imag <= 0.0):
            raise ValueError("assignment must lie in the upper half plane")


def _det_values(Gamma, L: int) -> np.ndarray:
    vals = Gamma.values if isinstance(Gamma, GreenVector) else \
        np.asarray(Gamma, dtype=np.complex128)
    if vals.shape != (L,):
        raise ValueError("need one Green value per label")
    if np.any(vals.imag <= 0.0):
        raise ValueError("Green values must lie in the upper half plane")
    return vals


def weights_q(g) -> np.ndarray:
    """Normalized imaginary parts over one sphere."""
    g = np.asarray(g, dtype=np.complex128)
    if g.size == 0:
        raise ValueError("empty sphere")
    if np.any(g.imag <= 0.0):
        raise ValueError("values must lie in the upper half plane")
    im = g.imag
    return im / im.sum()


def Q_and_cos_alpha(g_x: complex, g_y: complex, G_ax: complex,
                    G_ay: complex) -> tuple[float, float]:
    """Mean-ratio weight Q in [0,1] and the angle cosine between the two
    offsets, with the degenerate-pair convention (0, 0)."""
    u_x = complex(g_x) - complex(G_ax)
    u_y = complex(g_y) - complex(G_ay)
    gam_x = gamma(g_x, G_ax)
    gam_y = gamma(g_y, G_ay)
    if gam_x < DEGENERACY_TOL or gam_y < DEGENERACY_TOL:
        return 0.0, 0.0
    gm = abs(u_x) * abs(u_y)
    am = 0.5 * (g_x.imag * G_ay.imag * gam_y + g_y.imag * G_ax.imag * gam_x)
    cos_a = (u_x.real * u_y.real + u_x.imag * u_y.imag) / gm
    return gm / am, min(1.0, max(-1.0, cos_a))


def _anchored_average(values: np.ndarray, det_lab: np.ndarray) -> np.ndarray:
    """For each anchor x on one sphere: sum_y q_y Q_{x,y} cos a_{x,y}.

    values: sphere assignment; det_lab: deterministic Green value per slot.
    Reference implementation (the batched kernel is the fast path).
    """
    m = values.size
    q = weights_q(values)
    out = np.zeros(m)
    for x in range(m):
        acc = 0.0
        for y in range(m):
            Q, ca = Q_and_cos_alpha(values[x], values[y], det_lab[x], det_lab[y])
            acc += q[y] * Q * ca
        out[x] = acc
    return out


def p_weights(M: SubstitutionMatrix, Gamma, j: int) -> np.ndarray:
    """Probability weights over S(T_j) in canonical order: Im Gamma of the
    label, normalized per sphere, with the o'-sphere weighted once more by
    the o' pass-through factor."""
    idx = two_sphere_index(M, j)
    det = _det_values(Gamma, M.L)
    im = det.imag
    D = float(M.M[j] @ im)
    w = np.empty(idx.n_total)
    w[:idx.n_surv] = im[idx.labels_all[:idx.n_surv]] / D
    w[idx.n_surv:] = im[j] * im[idx.labels_all[idx.n_surv:]] / (D * D)
    return w


def stochastic_P(M: SubstitutionMatrix, Gamma) -> np.ndarray:
    """Label-transition matrix: P[j, k] = total p-weight of label-k vertices
    of S(T_j).  Row-stochastic."""
    det = _det_values(Gamma, M.L)
    P = np.zeros((M.L, M.L))
    for j in range(M.L):
        idx = two_sphere_index(M, j)
        w = p_weights(M, det, j)
        np.add.at(P[j], idx.labels_all, w)
    return P


def g_oprime(M: SubstitutionMatrix, z: complex, j: int, g_op) -> complex:
    """Recursed value at o' from its forward sphere."""
    g_op = np.asarray(g_op, dtype=np.complex128)
    if g_op.size != int(M.row_sums()[j]):
        raise ValueError("o'-sphere size must match the substitution row")
    return mobius_step(z, float(M.degrees()[j]), complex(g_op.sum()))


def contraction_c(assign: SphereAssignment, Gamma, z: complex,
                  mode: str = "damped") -> np.ndarray:
    """Per-vertex contraction coefficients c_x over S(T_j).

    Root-sphere survivors average against the hat sphere (survivors plus
    the recursed o' value).  o'-sphere vertices carry the product of the
    o'-anchored hat average and their own within-sphere average; "damped"
    (default) keeps the finite-eta pass-through factor rho in (0, 1) that
    the exact one-step identity produces, "product" drops it (the eta -> 0
    display shape).  |c_x| <= 1 either way.
    """
    if mode not in ("damped", "product"):
        raise ValueError("mode must be 'damped' or 'product'")
    idx = assign.index
    z = complex(z)
    raw = Gamma.values if isinstance(Gamma, GreenVector) else \
        np.asarray(Gamma, dtype=np.complex128)
    det = _det_values(raw, raw.shape[0])
    g = assign.g
    n_s = idx.n_surv
    g_op_sphere = g[n_s:]
    s2 = complex(g_op_sphere.sum())
    g_hat_op = -1.0 / (z - idx.deg_j + s2)
    ghat = np.empty(idx.hat_labels.size, dtype=np.complex128)
    ghat[idx.surv_to_hat] = g[:n_s]
    ghat[idx.oprime_slot] = g_hat_op
    inner_hat = _anchored_average(ghat, det[idx.hat_labels])
    inner_op = _anchored_average(g_op_sphere, det[idx.labels_all[n_s:]])
    c = np.empty(idx.n_total)
    c[:n_s] = inner_hat[idx.surv_to_hat]
    scale = inner_hat[idx.oprime_slot]
    if mode == "damped":
        mg = complex((det[idx.labels_all[n_s:]]).sum())
        eta = z.imag
        rho = (s2.imag * mg.imag) / ((eta + s2.imag) * (eta + mg.imag))
        scale *= rho
    c[n_s:] = scale * inner_op
    return c


def label_invariant_permutations(M: SubstitutionMatrix, j: int,
                                 cap: int = PERM_CAP, seed: int = 0,
                                 mode: str = "full"):
    """Permutations of S(T_j) preserving every vertex label.

    Returns (perms, sampled): an (n_perms, n_total) index array and whether
    the cap forced uniform sampling.  mode "swap2" restricts to the identity
    plus one cross-sphere same-label transposition.
    """
    idx = two_sphere_index(M, j)
    labels = idx.labels_all
    n = idx.n_total
    if mode == "swap2":
        perms = [np.arange(n, dtype=np.int64)]
        swap = None
        for a in range(idx.n_surv):
            for b in range(idx.n_surv, n):
                if labels[a] == labels[b]:
                    swap = (a, b)
                    break
            if swap:
                break
        if swap is None:
            raise ValueError("no cross-sphere same-label pair to swap")
        pi = np.arange(n, dtype=np.int64)
        pi[swap[0]], pi[swap[1]] = pi[swap[1]], pi[swap[0]]
        perms.append(pi)
        return np.stack(perms), False
    if mode != "full":
        raise ValueError("mode must be 'full' or 'swap2'")
    classes = [np.nonzero(labels == k)[0] for k in range(int(labels.max()) + 1)]
    classes = [c for c in classes if c.size]
    total = 1
    for c in classes:
        total *= math.factorial(int(c.size))
        if total > cap:
            break
    if total > cap:
        rng = np.random.default_rng(fold_seed(seed, j, n))
        perms = np.tile(np.arange(n, dtype=np.int64), (cap, 1))
        for c in classes:
            for r in range(1, cap):
                perms[r, c] = c[rng.permutation(c.size)]
        return perms, True
    out = np.empty((total, n), dtype=np.int64)
    per_class = [list(itertools.permutations(c.tolist())) for c in classes]
    for r, combo in enumerate(itertools.product(*per_class)):
        pi = np.empty(n, dtype=np.int64)
        for c, images in zip(classes, combo):
            pi[c] = images
        out[r] = pi
    return out, False


@dataclass
class KappaResult:
    value: float
    degenerate: bool
    sampled_perms: bool
    n_perms: int


def _kappa_inputs(M: SubstitutionMatrix, j: int, Gamma, z: complex):
    idx = two_sphere_index(M, j)
    det = _det_values(Gamma, M.L)
    pj = p_weights(M, det, j)
    mg = np.complex128(M.M[j].astype(np.complex128) @ det)
    return idx, det, pj, mg


def kappa(M: SubstitutionMatrix, j: int, p: float, assign: SphereAssignment,
          Gamma, z: complex, perm_mode: str = "full", cap: int = PERM_CAP,
          seed: int = 0, mode: str = "damped") -> KappaResult:
    """Permutation-averaged contraction coefficient for one assignment."""
    if p <= 1.0:
        raise ValueError("p must exceed 1")
    idx, det, pj, mg = _kappa_inputs(M, j, Gamma, z)
    perms, sampled = label_invariant_permutations(M, j, cap=cap, seed=seed,
                                                  mode=perm_mode)
    g_batch = np.ascontiguousarray(assign.g[None, :])
    num, den = backend.kappa_batch(g_batch, perms, idx.labels_all, idx.n_surv,
                                   idx.hat_labels, idx.surv_to_hat,
                                   idx.oprime_slot, det, np.complex128(z),
                                   idx.deg_j, mg, pj, float(p),
                                   mode == "damped")
    if den[0] <= 0.0:
        return KappaResult(0.0, True, sampled, perms.shape[0])
    return KappaResult(float(num[0] / den[0]), False, sampled, perms.shape[0])


def perron_left_vector(P: np.ndarray, tol: float = 1e-10,
                       max_iter: int = 100_000) -> np.ndarray:
    """Positive left fixed vector of a row-stochastic matrix, 1-normalized,
    by power iteration."""
    P = np.asarray(P, dtype=np.float64)
    L = P.shape[0]
    if P.shape != (L, L) or np.any(P < 0):
        raise ValueError("P must be a nonnegative square matrix")
    u = np.full(L, 1.0 / L)
    for _ in range(max_iter):
        nxt = P.T @ u
        nxt /= nxt.sum()
        if float(np.max(np.abs(P.T @ nxt - nxt))) <= tol:
            if np.any(nxt <= 0):
                raise ArithmeticError("left eigenvector not positive")
            return nxt
        u = nxt
    raise ArithmeticError("power iteration did not converge")


@dataclass
class WindowConstants:
    r: float
    c1: float
    c2: float
    interval: tuple[float, float]
    eta_max: float
    p: float

    def to_json(self) -> dict:
        return {"r": self.r, "c1": self.c1, "c2": self.c2,
                "interval": list(self.interval), "eta_max": self.eta_max,
                "p": self.p}


def window_constants(M: SubstitutionMatrix, interval, eta_max: float,
                     p: float, n_energy: int = 41, n_eta: int = 12,
                     eta_floor: float = 1e-6) -> WindowConstants:
    """Explicit constants of the expansion estimates over a spectral window.

    r bounds (|Gamma_k| + 1)/Im Gamma_l over z in I + i(0, eta_max], scanned
    on an energy grid times a log-spaced eta grid; c1 = 4 r^3 max_k (row
    sum)^2 and c2 = 2^p c1^(2p).
    """
    lo, hi = float(interval[0]), float(interval[1])
    if not (lo < hi):
        raise ValueError("empty window")
    if p <= 1.0:
        raise ValueError("p must exceed 1")
    pad = 0.05 * (hi - lo)
    grid = np.linspace(lo - pad, hi + pad, max(n_energy, 41))
    rep = detect_bands(M, grid, eta_min=min(eta_floor, 1e-6))
    covered = any(a <= lo and hi <= b for a, b in rep.intervals)
    if not covered:
        raise ValueError("window not inside a detected spectral band")
    if any(lo <= e <= hi for e in rep.flagged):
        raise ValueError("window touches a flagged grid point")
    energies = np.linspace(lo, hi, n_energy)
    etas = np.geomspace(eta_floor, eta_max, n_eta)
    r = 0.0
    prev = None
    for E in energies:
        for eta in etas[::-1]:
            gv = solve_green(M, complex(E, eta), x0=prev)
            if not gv.converged:
                raise ArithmeticError(f"solver failed in window at {E}+{eta}i")
            prev = gv.values
            num = float(np.max(np.abs(gv.values))) + 1.0
            den = float(np.min(gv.values.imag))
            r = max(r, num / den)
    c1 = 4.0 * r ** 3 * float(np.max(M.row_sums()) ** 2)
    c2 = 2.0 ** p * c1 ** (2.0 * p)
    return WindowConstants(r=r, c1=c1, c2=c2, interval=(lo, hi),
                           eta_max=eta_max, p=p)


@dataclass
class Delta0Report:
    """Sampled contraction maximum over probe assignments at one z."""

    M: SubstitutionMatrix
    z: complex
    p: float
    n_samples: int
    sup_kappa: float
    margin: float
    per_family_max: dict
    per_label_max: list
    sampled_perms: bool
    seed: int
    samples: list | None = None

    def to_json(self) -> dict:
        return {"M": json.loads(self.M.to_json()),
                "z": [self.z.real, self.z.imag], "p": self.p,
                "n_samples": self.n_samples, "sup_kappa": self.sup_kappa,
                "margin": self.margin, "per_family_max": self.per_family_max,
                "per_label_max": self.per_label_max,
                "sampled_perms": self.sampled_perms, "seed": self.seed}


_GAUSS_SCALES = (1e-3, 1e-2, 1e-1, 1.0, 1e1, 1e2, 1e3)
_FAMILIES = ("gauss", "cauchy", "near_axis")


def _probe_batch(family: str, rng: np.random.Generator, n: int,
                 det_slot: np.ndarray) -> np.ndarray:
    """One batch of random sphere assignments (n, n_total) in family."""
    m = det_slot.size
    if family == "gauss":
        scale = _GAUSS_SCALES[int(rng.integers(len(_GAUSS_SCALES)))]
        re = det_slot.real + scale * rng.standard_normal((n, m))
        im = det_slot.imag + scale * rng.standard_normal((n, m))
        im = np.abs(im) + 1e-12
    elif family == "cauchy":
        re = det_slot.real + rng.standard_cauchy((n, m))
        im = np.abs(rng.standard_cauchy((n, m))) + 1e-12
    elif family == "near_axis":
        re = det_slot.real + rng.standard_normal((n, m))
        im = 10.0 ** rng.uniform(-8.0, 0.0, (n, m))
    else:
        raise ValueError(family)
    return re + 1j * im


def estimate_delta0(M: SubstitutionMatrix, z: complex, p: float,
                    n_samples: int, seed: int = 0, perm_mode: str = "full",
                    threads: int | None = None, keep_samples: bool = False,
                    batch: int = 2048) -> Delta0Report:
    """Monte-Carlo maximum of kappa over stress-test assignments.

    Probes mix Gaussian clouds around the fixed point across seven orders
    of magnitude, heavy-tailed Cauchy draws, and near-axis values; the
    maximum over labels and samples estimates sup kappa, reported with the
    margin 1 - max.  A max at 1 (beyond 1e-9) raises: it would contradict
    the uniform contraction estimate.
    """
    z = complex(z)
    gv = solve_green(M, z)
    if not gv.converged:
        raise ArithmeticError("Green solve failed at the requested z")
    if float(gv.values.imag.min()) < 1e-3:
        raise ValueError("z is not band-interior (Im Gamma too small)")
    sup = 0.0
    fam_max = {f: 0.0 for f in _FAMILIES}
    lab_max = [0.0] * M.L
    sampled_any = False
    kept = [] if keep_samples else None
    for j in range(M.L):
        idx, det, pj, mg = _kappa_inputs(M, j, gv, z)
        perms, sampled = label_invariant_permutations(M, j, seed=seed,
                                                      mode=perm_mode)
        sampled_any = sampled_any or sampled
        det_slot = det[idx.labels_all]
        n_batches = (n_samples + batch - 1) // batch
        slot_max = np.zeros(n_batches)
        slot_fam = np.zeros((n_batches, len(_FAMILIES)))
        slot_rows = [None] * n_batches if keep_samples else None

        def one_batch(bi, j=j, idx=idx, det=det, pj=pj, mg=mg, perms=perms,
                      det_slot=det_slot, slot_max=slot_max, slot_fam=slot_fam,
                      slot_rows=slot_rows):
            n_here = min(batch, n_samples - bi * batch)
            batch_seed = fold_seed(seed, j, bi)
            rng = np.random.default_rng(batch_seed)
            best = 0.0
            rows = []
            for fi, fam in enumerate(_FAMILIES):
                g = _probe_batch(fam, rng, n_here, det_slot)
                num, den = backend.kappa_batch(
                    g, perms, idx.labels_all, idx.n_surv, idx.hat_labels,
                    idx.surv_to_hat, idx.oprime_slot, det, np.complex128(z),
                    idx.deg_j, mg, pj, float(p), True)
                ok = den > 0.0
                vals = np.zeros(n_here)
                vals[ok] = num[ok] / den[ok]
                fmax = float(vals.max()) if n_here else 0.0
                slot_fam[bi, fi] = fmax
                best = max(best, fmax)
                if slot_rows is not None:
                    gmax = np.max(gamma(g, det_slot[None, :]), axis=1)
                    rows.append((batch_seed, vals, gmax))
            if slot_rows is not None:
                slot_rows[bi] = rows
            slot_max[bi] = best

        run_indexed(one_batch, n_batches, threads)
        jmax = float(slot_max.max())
        lab_max[j] = jmax
        sup = max(sup, jmax)
        for fi, fam in enumerate(_FAMILIES):
            fam_max[fam] = max(fam_max[fam], float(slot_fam[:, fi].max()))
        if keep_samples:
            for rows in slot_rows:
                if rows:
                    kept.extend(rows)
    if sup >= 1.0 - 1e-9:
        raise ArithmeticError(
            f"sampled kappa reached {sup}; contraction margin lost "
            f"(z={z}, p={p}); this contradicts the uniform estimate")
    return Delta0Report(M=M, z=z, p=p, n_samples=n_samples, sup_kappa=sup,
                        margin=1.0 - sup, per_family_max=fam_max,
                        per_label_max=lab_max, sampled_perms=sampled_any,
                        seed=seed, samples=kept)


def write_kappa_csv(path, report: Delta0Report) -> None:
    if report.samples is None:
        raise ValueError("report was built without keep_samples")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["seed", "kappa", "max_gamma_component"])
        for batch_seed, vals, gmax in report.samples:
            for v, gm in zip(vals, gmax):
                w.writerow([int(batch_seed), repr(float(v)), repr(float(gm))])


@dataclass
class ContractionReport:
    """P, its Perron vector, and the measured contraction margin."""

    P: np.ndarray
    u: np.ndarray
    delta0: Delta0Report
    constants: WindowConstants | None = None

    def to_json(self) -> dict:
        out = {"P": self.P.tolist(), "u": self.u.tolist(),
               "delta0": self.delta0.to_json()}
        if self.constants is not None:
            out["constants"] = self.constants.to_json()
        return out


def contraction_report(M: SubstitutionMatrix, z: complex, p: float,
                       n_samples: int, seed: int = 0,
                       window=None, eta_max: float = 1.0,
                       threads: int | None = None) -> ContractionReport:
    gv = solve_green(M, complex(z))
    P = stochastic_P(M, gv)
    u = perron_left_vector(P)
    rep = estimate_delta0(M, z, p, n_samples, seed=seed, threads=threads)
    consts = None
    if window is not None:
        consts = window_constants(M, window, eta_max, p)
    return ContractionReport(P=P, u=u, delta0=rep, constants=consts)
