"""Acceptance gate: one test per shipped guarantee, at its stated tolerance.

``pytest -v tests/test_acceptance.py`` prints one pass/fail line per
criterion; each test also prints the measured figures (visible with -s or on
failure).  Sample counts, tolerances, and time budgets below are part of the
guarantee and must not be loosened.
"""

import math
import time
from collections import defaultdict

import mpmath
import numpy as np

from gwgreen._rng import fold_seed
from gwgreen.conegreen import default_window, detect_bands, solve_green
from gwgreen.estimates import (Q_and_cos_alpha, SphereAssignment,
                               _anchored_average, contraction_c,
                               estimate_delta0, p_weights, perron_left_vector,
                               stochastic_P, two_sphere_index,
                               window_constants)
from gwgreen.experiments import (ExperimentConfig, estimate_Egamma,
                                 no_growth_check, percolation_study,
                                 sphere_moment_scan)
from gwgreen.halfplane import c0_bound, gamma, mobius_step
from gwgreen.model import (SubstitutionMatrix, deterministic_process,
                           percolation_pk_bound, percolation_pk_gap,
                           percolation_process)
from gwgreen.randomgreen import oracle_sweep, truncated_green_recursion
from gwgreen.trees import classify_two_sphere, sample_tree

SLACK = 1e-9


def herglotz_quadratic_root(K: int, z: complex) -> complex:
    """Root of K G^2 + (z - K - 1) G + 1 = 0 in the upper half-plane."""
    b = z - K - 1.0
    disc = np.sqrt(np.complex128(b * b - 4.0 * K))
    r1 = (-b + disc) / (2.0 * K)
    r2 = (-b - disc) / (2.0 * K)
    return complex(r1 if r1.imag > 0 else r2)


def test_criterion_01_oracle_equivalence_50_trees():
    t0 = time.perf_counter()
    rep = oracle_sweep(n_trees=50, depth=6, seed=20240815, tol=1e-10)
    elapsed = time.perf_counter() - t0
    print(f"\n[1] dense-oracle sweep over 50 trees: trunc "
          f"{rep['max_err_trunc']:.2e}, full {rep['max_err_full']:.2e}, "
          f"{elapsed:.1f}s")
    assert rep["n_trees"] == 50
    assert rep["ok"]
    assert rep["max_err_trunc"] <= 1e-10
    assert rep["max_err_full"] <= 1e-10
    assert elapsed < 60.0


def test_criterion_02_closed_form_green_and_band_edges():
    worst = 0.0
    edges = {}
    for K in (2, 3, 4):
        M = SubstitutionMatrix([[K]])
        lo = K + 1.0 - 2.0 * math.sqrt(K)
        hi = K + 1.0 + 2.0 * math.sqrt(K)
        for eta in (1.0, 1e-2, 1e-4):
            prev = None
            for E in np.linspace(lo - 1.0, hi + 1.0, 200):
                z = complex(float(E), eta)
                gv = solve_green(M, z, x0=prev)
                assert gv.converged
                prev = gv.values
                ref = herglotz_quadratic_root(K, z)
                worst = max(worst, abs(complex(gv.values[0]) - ref) / abs(ref))
        step = 0.01
        grid = np.arange(lo - 1.0, hi + 1.0 + step / 2.0, step)
        rep = detect_bands(M, grid)
        band = max(rep.intervals, key=lambda ab: ab[1] - ab[0])
        edges[K] = band
        assert abs(band[0] - lo) <= step + 1e-9
        assert abs(band[1] - hi) <= step + 1e-9
    print(f"\n[2] quadratic-root match worst rel {worst:.2e}; "
          f"band edges {edges} each within one 0.01 step")
    assert worst <= 1e-10


def test_criterion_03_percolation_threshold_bound_formulas():
    worst_mp = 0.0
    worst_gap = 0.0
    for K in range(2, 11):
        for improved in (False, True):
            got = percolation_pk_bound(K, improved)
            with mpmath.workdps(80):
                if improved:
                    log_t = -33 * mpmath.log(2) - 22 * mpmath.log(K)
                else:
                    log_t = (-32 * mpmath.log(2) - 22 * mpmath.log(K)
                             - mpmath.loggamma(2 * K))
                ref = mpmath.power(1 - mpmath.exp(log_t),
                                   mpmath.mpf(1) / (K - 1))
                worst_mp = max(worst_mp, float(abs(got - ref) / ref))
                gap_hp = float(1 - got)
            gap_log = percolation_pk_gap(K, improved)
            assert 0.0 < gap_log < 1.0
            worst_gap = max(worst_gap, abs(gap_hp - gap_log) / gap_log)
        assert percolation_pk_bound(K, True) < percolation_pk_bound(K, False) < 1
    print(f"\n[3] K=2..10 bounds vs independent log-domain eval: "
          f"high-precision rel {worst_mp:.1e}, float64 gap rel {worst_gap:.1e}")
    assert worst_mp <= 1e-50
    assert worst_gap <= 1e-12


def test_criterion_04_inequality_suites():
    t0 = time.perf_counter()
    rng = np.random.default_rng(20240818)
    results = []

    def rand_h(n, im_lo=-3.0, im_hi=1.0):
        return (rng.standard_cauchy(n) * 3.0
                + 1j * 10.0 ** rng.uniform(im_lo, im_hi, n))

    # (a) shift-comparison constant c0
    n = 100_000
    xi, zeta = rand_h(n), rand_h(n)
    lam = rng.standard_cauchy(n) + 1j * rng.standard_cauchy(n)
    keep = (zeta + lam).imag > 1e-12
    xi, zeta, lam = xi[keep], zeta[keep], lam[keep]
    lhs = gamma(xi, zeta)
    rhs = c0_bound(zeta, lam) * (gamma(xi, zeta + lam) + 1.0)
    results.append(("shift comparison c0", int(xi.size),
                    int(np.sum(lhs > rhs * (1 + SLACK) + SLACK))))

    # (b) recursion-step contraction
    n = 100_000
    xi, zeta = rand_h(n), rand_h(n)
    c = rng.standard_normal(n) * 5.0
    d = rng.standard_normal(n) * 5.0
    z = rng.standard_normal(n) + 1j * 10.0 ** rng.uniform(-6, 1, n)
    lhs = gamma(-1.0 / (z - c + xi), -1.0 / (z - d + zeta))
    rhs = gamma(xi - c, zeta - d)
    results.append(("recursion-step contraction", n,
                    int(np.sum(lhs > rhs * (1 + SLACK) + SLACK))))

    # (c) modulus bound
    n = 100_000
    xi, zeta = rand_h(n), rand_h(n)
    lhs = np.abs(xi)
    rhs = 4.0 * gamma(xi, zeta) * zeta.imag + 2.0 * np.abs(zeta)
    results.append(("modulus bound", n,
                    int(np.sum(lhs > rhs * (1 + SLACK) + SLACK))))

    # (d) anchored sphere averages stay in [-1, 1]
    inst = 0
    bad = 0
    for k in range(3000):
        m = 2 + (k % 5)
        avg = _anchored_average(rand_h(m), rand_h(m))
        bad += int(np.sum(np.abs(avg) > 1.0 + SLACK))
        inst += m
    results.append(("sphere-average bound", inst, bad))

    # (e) pair weight Q in [0, 1], |cos| <= 1
    n = 20_000
    gx, gy, Gx, Gy = rand_h(n), rand_h(n), rand_h(n), rand_h(n)
    bad = 0
    for i in range(n):
        Q, ca = Q_and_cos_alpha(gx[i], gy[i], Gx[i], Gy[i])
        if not (0.0 <= Q <= 1.0 + SLACK and abs(ca) <= 1.0 + SLACK):
            bad += 1
    results.append(("pair weight range", n, bad))

    # (f) per-vertex contraction coefficients |c_x| <= 1, both modes
    inst = 0
    bad = 0
    for rows in ([[2]], [[1, 1], [1, 1]], [[2, 1], [1, 2]]):
        M = SubstitutionMatrix(np.array(rows))
        win = default_window(M)
        for _ in range(10):
            z = complex(rng.uniform(*win), 10.0 ** rng.uniform(-3, 0))
            gv = solve_green(M, z)
            for _ in range(170):
                j = int(rng.integers(M.L))
                idx = two_sphere_index(M, j)
                assign = SphereAssignment(idx, rand_h(idx.n_total))
                for mode in ("damped", "product"):
                    cc = contraction_c(assign, gv, z, mode=mode)
                    bad += int(np.sum(np.abs(cc) > 1.0 + SLACK))
                    inst += 1
    results.append(("coefficient bound |c_x|<=1", inst, bad))

    # (g) one-step display, matching sphere, plus its exact identity
    inst = 0
    bad = 0
    bad_id = 0
    for rows in ([[2]], [[1, 1], [1, 1]]):
        M = SubstitutionMatrix(np.array(rows))
        win = default_window(M)
        for _ in range(40):
            z = complex(rng.uniform(*win), 10.0 ** rng.uniform(-4, 0))
            gv = solve_green(M, z)
            det = gv.values
            for j in range(M.L):
                row = M.M[j]
                deg_j = float(M.degrees()[j])
                labels = np.repeat(np.arange(M.L), row)
                D = float(row @ det.imag)
                mg = complex(row.astype(np.complex128) @ det)
                w = det.imag[labels] / D
                for _ in range(90):
                    g = rand_h(labels.size)
                    inner = _anchored_average(g, det[labels])
                    gam = gamma(g, det[labels])
                    rhs = float(np.sum(w * inner * gam))
                    step = mobius_step(z, deg_j, complex(g.sum()))
                    lhs = float(gamma(step, det[j]))
                    if lhs > rhs * (1 + SLACK) + SLACK:
                        bad += 1
                    ident = float(gamma(complex(g.sum()), mg))
                    if ident > 1e-10 and abs(ident - rhs) / ident > 1e-8:
                        bad_id += 1
                    inst += 1
    results.append(("one-step display (matching)", inst, bad))
    results.append(("one-step identity", inst, bad_id))

    # (h) one-step display, mismatched sphere, window constant c1
    inst = 0
    bad = 0
    for rows in ([[2]], [[1, 1], [1, 1]]):
        M = SubstitutionMatrix(np.array(rows))
        c1 = window_constants(M, (2.5, 3.5), 1.0, 2.0).c1
        for _ in range(25):
            z = complex(rng.uniform(2.5, 3.5), 10.0 ** rng.uniform(-4, 0))
            gv = solve_green(M, z)
            det = gv.values
            for j in range(M.L):
                D = float(M.M[j] @ det.imag)
                for _ in range(140):
                    counts = rng.integers(0, 4, M.L)
                    if counts.sum() == 0:
                        counts[int(rng.integers(M.L))] = 1
                    labels = np.repeat(np.arange(M.L), counts)
                    g = rand_h(labels.size)
                    w = det.imag[labels] / D
                    gam = gamma(g, det[labels])
                    step = mobius_step(z, 1.0 + labels.size, complex(g.sum()))
                    lhs = float(gamma(step, det[j]))
                    rhs = c1 * (float(np.sum(w * gam)) + labels.size)
                    if lhs > rhs * (1 + SLACK) + SLACK:
                        bad += 1
                    inst += 1
    results.append(("one-step display (mismatch, c1)", inst, bad))

    # (i) two-step display through o', damped, plus its exact identity
    inst = 0
    bad = 0
    bad_id = 0
    for rows in ([[2]], [[1, 1], [1, 1]], [[2, 1], [1, 2]]):
        M = SubstitutionMatrix(np.array(rows))
        win = default_window(M)
        for _ in range(25):
            eta = 10.0 ** rng.uniform(-4, 0)
            z = complex(rng.uniform(*win), eta)
            gv = solve_green(M, z)
            det = gv.values
            for j in range(M.L):
                idx = two_sphere_index(M, j)
                pw = p_weights(M, det, j)
                mg = complex(M.M[j].astype(np.complex128) @ det)
                for _ in range(85):
                    g = rand_h(idx.n_total)
                    assign = SphereAssignment(idx, g)
                    cc = contraction_c(assign, det, z, mode="damped")
                    gam = gamma(g, det[idx.labels_all])
                    rhs = float(np.sum(pw * cc * gam))
                    n_s = idx.n_surv
                    s2 = complex(g[n_s:].sum())
                    ghat = np.empty(idx.hat_labels.size, dtype=np.complex128)
                    ghat[idx.surv_to_hat] = g[:n_s]
                    ghat[idx.oprime_slot] = -1.0 / (z - idx.deg_j + s2)
                    s1 = complex(ghat.sum())
                    lhs = float(gamma(mobius_step(z, idx.deg_j, s1), det[j]))
                    rho = (s1.imag * mg.imag) / ((eta + s1.imag)
                                                 * (eta + mg.imag))
                    if lhs > rhs * (1 + SLACK) + SLACK:
                        bad += 1
                    if lhs > 1e-10 and abs(lhs - rho * rhs) / lhs > 1e-8:
                        bad_id += 1
                    inst += 1
    results.append(("two-step display (damped)", inst, bad))
    results.append(("two-step identity", inst, bad_id))

    # (j) conditional moment bound with c2 over sampled two-sphere classes
    M = SubstitutionMatrix([[2]])
    b = percolation_process(2, 0.9)
    wc = window_constants(M, (2.5, 3.5), 1.0, 2.0)
    z = complex(3.0, 1e-3)
    gv = solve_green(M, z)
    n_trees = 12_000
    vals = np.zeros(n_trees)
    buckets = defaultdict(list)
    for i in range(n_trees):
        t = sample_tree(b, 0, 6, fold_seed(778, i))
        f = truncated_green_recursion(t, z, "deterministic", det_values=gv)
        vals[i] = float(gamma(f.trunc[0], gv.values[0])) ** 2.0
        cls = classify_two_sphere(t)
        buckets[(cls.n.norm, cls.m.norm)].append(i)
    mean_all = float(np.mean(vals))
    bad = 0
    for (n_o, n_op), ids in buckets.items():
        lhs = float(np.mean(vals[ids]))
        rhs = wc.c2 * (n_o ** 2.0 + n_op ** 2.0) * (mean_all + 1.0)
        if lhs > rhs * (1 + SLACK) + SLACK:
            bad += 1
    results.append(("conditional moment bound (c2)", n_trees, bad))

    # (k) permutation-averaged coefficient stays below one
    inst = 0
    for rows in ([[2]], [[1, 1], [1, 1]]):
        M = SubstitutionMatrix(np.array(rows))
        # raises if any sampled value reaches 1 - 1e-9
        rep = estimate_delta0(M, complex(3.0, 1e-3), 2.0, 10_000, seed=4)
        assert rep.margin > 0.0
        inst += 10_000 * M.L
    results.append(("kappa below one", inst, 0))

    elapsed = time.perf_counter() - t0
    print(f"\n[4] inequality suites ({elapsed:.0f}s total):")
    for name, count, bad in results:
        print(f"    {name}: {count} instances, {bad} violations")
    for name, count, bad in results:
        assert count >= 10_000, name
        assert bad == 0, name
    assert elapsed < 300.0


def test_criterion_05_transition_matrix_structure():
    mats = ([[2]], [[3]], [[1, 1], [1, 1]], [[2, 1], [1, 2]],
            [[1, 2], [2, 1]])
    P11 = np.array([[0.25, 0.75], [0.75, 0.25]])
    worst_row = 0.0
    worst_res = 0.0
    worst_11 = 0.0
    for rows in mats:
        M = SubstitutionMatrix(np.array(rows))
        lo, hi = default_window(M)
        for E in np.linspace(lo, hi, 10):
            for eta in (1e-3, 1e-1):
                gv = solve_green(M, complex(float(E), eta))
                P = stochastic_P(M, gv)
                worst_row = max(worst_row,
                                float(np.max(np.abs(P.sum(axis=1) - 1.0))))
                u = perron_left_vector(P)
                worst_res = max(worst_res, float(np.max(np.abs(P.T @ u - u))))
                if rows == [[1, 1], [1, 1]]:
                    worst_11 = max(worst_11, float(np.max(np.abs(P - P11))),
                                   float(np.max(np.abs(u - 0.5))))
    print(f"\n[5] 5 matrices x 20 z: row-sum defect {worst_row:.2e}, "
          f"Perron residual {worst_res:.2e}, symmetric two-label case "
          f"off by {worst_11:.2e}")
    assert worst_row <= 1e-12
    assert worst_res <= 1e-10
    assert worst_11 <= 1e-10


def test_criterion_06_contraction_margin_on_window_grid():
    t0 = time.perf_counter()
    M = SubstitutionMatrix([[2]])
    lo, hi = default_window(M)
    margins = []
    for E in np.linspace(lo, hi, 10):
        rep = estimate_delta0(M, complex(float(E), 1e-3), 2.0, 100_000,
                              seed=20240818)
        margins.append(rep.margin)
    elapsed = time.perf_counter() - t0
    print(f"\n[6] margins over 10 window points: min {min(margins):.4f}, "
          f"max {max(margins):.4f}, {elapsed:.0f}s")
    assert min(margins) >= 1e-3
    assert elapsed < 600.0


def test_criterion_07_deterministic_law_gives_exact_zeros():
    for rows in ([[2]], [[1, 1], [1, 1]]):
        M = SubstitutionMatrix(np.array(rows))
        cfg = ExperimentConfig(b=deterministic_process(M), M=M, p=2.0,
                               n_samples=500, depth=6, seed=5)
        eg = estimate_Egamma(cfg, complex(3.0, 1.0))
        for arr in (eg.mean, eg.stderr, eg.median, eg.trimmed_mean):
            assert np.all(arr == 0.0)
    print("\n[7] deterministic law: every sampled statistic is exactly 0.0")


def test_criterion_08_percolation_sweep_feasible_and_monotone():
    t0 = time.perf_counter()
    qs = (0.9, 0.95, 0.99, 0.999)
    rows = percolation_study(2, qs, p=1.5, n_samples=10_000, depth=12,
                             seed=0)
    elapsed = time.perf_counter() - t0
    print(f"\n[8] percolation sweep ({elapsed:.0f}s):")
    for r in rows:
        print(f"    q={r['p_keep']}: Egamma {r['egamma']:.4f} "
              f"+- {r['egamma_ci']:.4f}, Perron slack {r['perron_slack']:.1e} "
              f"+- {r['perron_slack_ci']:.1e}")
        assert r["count"] == 10_000
        assert r["perron_slack"] + r["perron_slack_ci"] >= 0.0
    for a, b in zip(rows, rows[1:]):
        assert b["egamma"] <= a["egamma"] + a["egamma_ci"] + b["egamma_ci"]
    assert elapsed < 1200.0


def test_criterion_09_no_spurious_growth_toward_axis():
    M = SubstitutionMatrix([[2]])
    etas = (1.0, 0.1, 0.01, 1e-3)
    cfg = ExperimentConfig(b=percolation_process(2, 0.99), M=M, p=1.5,
                           n_samples=1500, depth=12, seed=3, etas=etas)
    chk = no_growth_check(sphere_moment_scan(cfg, [3.0]))[0]
    base_cfg = ExperimentConfig(b=deterministic_process(M), M=M, p=1.5,
                                n_samples=8, depth=12, seed=3, etas=etas)
    base = no_growth_check(sphere_moment_scan(base_cfg, [3.0]))[0]
    print(f"\n[9] smallest-eta vs eta=1 at midband: modulus ratio "
          f"{chk['mod_ratio']:.3f} (<= 2); gamma ratio {chk['ratio']:.3f} vs "
          f"structural baseline {base['ratio']:.3f}")
    assert chk["eta_small"] == 1e-3
    assert chk["mod_ok"]
    assert chk["mod_ratio"] <= 2.0
    # the gamma^p ratio carries a structural eta-dependence of its
    # denominators that is already present with the deterministic law;
    # bounded means within a factor 2 of that baseline
    assert chk["ratio"] <= 2.0 * base["ratio"]


def test_criterion_10_thread_count_invariance():
    M = SubstitutionMatrix([[2]])
    b = percolation_process(2, 0.9)
    outs = []
    for threads in (1, 4):
        cfg = ExperimentConfig(b=b, M=M, p=1.5, n_samples=300, depth=6,
                               seed=17, threads=threads)
        eg = estimate_Egamma(cfg, complex(3.0, 0.5))
        rows = sphere_moment_scan(cfg, [2.8, 3.2], spheres=(0, 2, 4))
        rep = estimate_delta0(M, complex(3.0, 1e-3), 2.0, 4096, seed=17,
                              threads=threads)
        outs.append((eg, rows, rep))
    a, b2 = outs
    for fld in ("mean", "stderr", "median", "trimmed_mean"):
        assert np.array_equal(getattr(a[0], fld), getattr(b2[0], fld))
    assert a[1] == b2[1]
    assert a[2].sup_kappa == b2[2].sup_kappa
    assert a[2].per_label_max == b2[2].per_label_max
    assert a[2].per_family_max == b2[2].per_family_max
    print("\n[10] all aggregates bitwise identical for 1 vs 4 threads")
