"""Substitution matrices, offspring laws, the d_p metric, and the
closed-form percolation bounds."""

import json
import math

import mpmath
import numpy as np
import pytest

from gwgreen.model import (BranchingProcess, LabelAlphabet, OffspringConfig,
                           SubstitutionMatrix, deterministic_process,
                           dp_distance, moment_p, percolation_pk_bound,
                           percolation_pk_gap, percolation_process,
                           validate_process)

RNG = np.random.default_rng(7)


def random_law(n_labels, rng):
    offspring = []
    for _ in range(n_labels):
        k = int(rng.integers(1, 4))
        entries = []
        probs = rng.dirichlet(np.ones(k))
        for p in probs:
            counts = rng.integers(0, 3, n_labels)
            if counts.sum() == 0:
                counts[rng.integers(n_labels)] = 1
            entries.append((OffspringConfig.from_counts(counts), float(p)))
        offspring.append(entries)
    return BranchingProcess(n_labels, offspring)


def test_alphabet_validation():
    assert LabelAlphabet(3).size == 3
    with pytest.raises(ValueError):
        LabelAlphabet(0)


def test_matrix_validation():
    with pytest.raises(ValueError):
        SubstitutionMatrix([[1, 2], [3, 4], [5, 6]])
    with pytest.raises(ValueError):
        SubstitutionMatrix([[2, 0], [1, 1]])
    with pytest.raises(ValueError):
        SubstitutionMatrix([[1]])
    M = SubstitutionMatrix([[2]])
    assert M.L == 1
    assert M.degrees().tolist() == [3.0]
    M2 = SubstitutionMatrix([[1, 1], [1, 1]])
    assert M2.degrees().tolist() == [3.0, 3.0]
    assert M2.row_sums().tolist() == [2, 2]
    assert M2.alphabet.size == 2


def test_matrix_equality_and_json():
    M = SubstitutionMatrix([[2, 1], [1, 3]])
    assert M == SubstitutionMatrix.from_json(M.to_json())
    assert M != SubstitutionMatrix([[2, 1], [1, 2]])
    assert hash(M) == hash(SubstitutionMatrix([[2, 1], [1, 3]]))


def test_offspring_config_canonical():
    a = OffspringConfig.from_counts([0, 2, 1])
    b = OffspringConfig.from_counts({2: 1, 1: 2})
    assert a == b
    assert a.norm == 3
    assert a.dense(3).tolist() == [0, 2, 1]
    with pytest.raises(ValueError):
        a.dense(2)
    with pytest.raises(ValueError):
        OffspringConfig.from_counts([-1])


def test_branching_process_validation():
    with pytest.raises(ValueError):
        BranchingProcess(2, [[(OffspringConfig.from_counts([1, 0]), 1.0)]])
    with pytest.raises(ValueError):
        BranchingProcess(1, [[]])
    with pytest.raises(ValueError):
        BranchingProcess(1, [[([2], -0.5)], ])
    with pytest.raises(ValueError):
        # label outside the alphabet
        BranchingProcess(1, [[(OffspringConfig.from_counts({1: 1}), 1.0)]])
    with pytest.raises(ValueError):
        # normalization beyond repair
        BranchingProcess(1, [[([2], 0.5)]])


def test_branching_process_renormalizes_with_warning():
    with pytest.warns(UserWarning):
        b = BranchingProcess(1, [[([2], 0.5 + 1e-10), ([1], 0.5)]])
    total = math.fsum(p for _, p in b.table[0])
    assert total == pytest.approx(1.0, abs=1e-15)


def test_branching_process_merges_duplicates():
    b = BranchingProcess(1, [[([2], 0.25), ({0: 2}, 0.25), ([1], 0.5)]])
    assert len(b.table[0]) == 2
    merged = dict(b.table[0])
    assert merged[OffspringConfig.from_counts([2])] == pytest.approx(0.5)


def test_deterministic_process():
    M = SubstitutionMatrix([[2, 1], [1, 1]])
    b = deterministic_process(M)
    assert b.satisfies_condition_f()
    assert b.max_branch() == 3
    for j in range(M.L):
        (cfg, prob), = b.table[j]
        assert prob == 1.0
        assert cfg.dense(M.L).tolist() == M.M[j].tolist()
    np.testing.assert_allclose(b.mean_matrix(), M.M)


def test_validate_process_reports():
    M = SubstitutionMatrix([[2]])
    assert validate_process(deterministic_process(M)).ok
    bad = BranchingProcess(1, [[(OffspringConfig(), 0.3), ([2], 0.7)]])
    rep = validate_process(bad)
    assert not rep.ok
    assert rep.f_violations and rep.f_violations[0][0] == 0
    assert not bad.satisfies_condition_f()


def test_dp_distance_hand_value():
    # percolation(2, q) vs the sure law: mass 1-q moved from ||s||=2 to
    # ||s||=1, so d_p = (1-q) 2^p + (1-q)
    b = percolation_process(2, 0.9)
    bM = deterministic_process(SubstitutionMatrix([[2]]))
    expect = 0.1 * 2.0 ** 1.5 + 0.1
    assert dp_distance(b, bM, 1.5) == pytest.approx(expect, rel=1e-12)
    assert dp_distance(bM, bM, 1.5) == 0.0


def test_dp_distance_metric_properties():
    rng = np.random.default_rng(11)
    for _ in range(50):
        b1, b2, b3 = (random_law(2, rng) for _ in range(3))
        p = float(rng.uniform(1.1, 3.0))
        d12 = dp_distance(b1, b2, p)
        d21 = dp_distance(b2, b1, p)
        assert d12 == pytest.approx(d21, rel=1e-12)
        assert d12 >= 0.0
        assert dp_distance(b1, b1, p) == 0.0
        assert d12 <= dp_distance(b1, b3, p) + dp_distance(b3, b2, p) + 1e-12


def test_dp_distance_label_mismatch():
    with pytest.raises(ValueError):
        dp_distance(random_law(1, RNG), random_law(2, RNG), 2.0)


def test_moment_p():
    b = percolation_process(2, 0.7)
    # ||s|| is 1 w.p. 0.3 and 2 w.p. 0.7
    assert moment_p(b, 2.0)[0] == pytest.approx(0.3 + 0.7 * 4.0, rel=1e-12)
    assert moment_p(b, 1.0)[0] == pytest.approx(1.7, rel=1e-12)


def test_percolation_process_binomial():
    K, q = 4, 0.8
    b = percolation_process(K, q)
    assert b.satisfies_condition_f()
    probs = {cfg.norm: p for cfg, p in b.table[0]}
    for m in range(K):
        expect = math.comb(K - 1, m) * q ** m * (1 - q) ** (K - 1 - m)
        assert probs[1 + m] == pytest.approx(expect, rel=1e-12)
    sure = percolation_process(3, 1.0)
    assert len(sure.table[0]) == 1
    assert sure.table[0][0][0].norm == 3
    with pytest.raises(ValueError):
        percolation_process(1, 0.5)
    with pytest.raises(ValueError):
        percolation_process(2, 0.0)


def test_pk_bound_ordering_and_gap():
    for K in range(2, 11):
        plain = percolation_pk_bound(K, improved=False)
        improved = percolation_pk_bound(K, improved=True)
        with mpmath.workdps(60):
            assert improved < plain < 1
        assert percolation_pk_gap(K, False) > 0.0
        assert percolation_pk_gap(K, True) > 0.0
    # K = 2: exponent 1/(K-1) = 1, so the gap equals the subtracted term
    assert percolation_pk_gap(2, False) == pytest.approx(2.0 ** -54 / 6.0,
                                                         rel=1e-14)
    assert percolation_pk_gap(2, True) == pytest.approx(2.0 ** -55,
                                                        rel=1e-14)
    with pytest.raises(ValueError):
        percolation_pk_bound(1, False)
    with pytest.raises(ValueError):
        percolation_pk_gap(1, True)


def test_branching_process_json_roundtrip():
    b = random_law(3, np.random.default_rng(5))
    b2 = BranchingProcess.from_json(b.to_json())
    assert b == b2
    payload = json.loads(b.to_json())
    assert payload["labels"] == 3


def test_sampling_tables_layout():
    b = percolation_process(3, 0.6)
    counts, cum, ptr = b.sampling_tables()
    assert ptr.tolist() == [0, len(b.table[0])]
    assert cum[-1] == 1.0
    assert np.all(np.diff(cum) > 0)
    norms = counts.sum(axis=1)
    assert sorted(norms.tolist()) == [1, 2, 3]
    assert b.sampling_tables()[0] is counts  # cached
    assert not counts.flags.writeable
