"""Label alphabets, substitution matrices, and branching-process laws.

A substitution matrix M (positive integer L x L) generates a rooted tree in
which a vertex of label j has exactly M[j][k] forward neighbors of label k;
its degree is deg(j) = 1 + sum_k M[j][k].  A branching process assigns to each
label a finite list of offspring configurations with probabilities; the
deterministic process concentrated on the rows of M recovers the periodic
tree.  Laws are compared in the moment-weighted total-variation metric

    d_p(b1, b2) = max_j sum_s |P_j^{b1}(s) - P_j^{b2}(s)| * ||s||^p.

Everything here is exact, finite-support combinatorics; no sampling.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field

import mpmath
import numpy as np

# Normalization handling at construction: defects up to NORM_TOL are accepted
# silently, up to NORM_RENORM renormalized with a warning, beyond that error.
NORM_TOL = 1e-12
NORM_RENORM = 1e-9


@dataclass(frozen=True)
class LabelAlphabet:
    """Finite set of vertex labels 0..size-1."""

    size: int

    def __post_init__(self):
        if self.size < 1:
            raise ValueError("alphabet needs at least one label")


class SubstitutionMatrix:
    """Positive integer matrix M generating a tree of finite cone type.

    M[j][k] is the number of label-k forward neighbors of a label-j vertex.
    All entries must be >= 1; a single label additionally needs M[0][0] >= 2
    (otherwise the tree degenerates to a half-line).
    """

    def __init__(self, entries) -> None:
        M = np.asarray(entries, dtype=np.int64)
        if M.ndim != 2 or M.shape[0] != M.shape[1]:
            raise ValueError("substitution matrix must be square")
        if not np.all(M >= 1):
            raise ValueError("substitution matrix entries must be >= 1")
        if M.shape[0] == 1 and M[0, 0] < 2:
            raise ValueError("single-label matrix needs M[0][0] >= 2")
        M.setflags(write=False)
        self.M = M
        self.L = int(M.shape[0])

    @property
    def alphabet(self) -> LabelAlphabet:
        return LabelAlphabet(self.L)

    def degrees(self) -> np.ndarray:
        """deg(j) = 1 + sum_k M[j][k], as float64."""
        return 1.0 + self.M.sum(axis=1).astype(np.float64)

    def row_sums(self) -> np.ndarray:
        return self.M.sum(axis=1)

    def __eq__(self, other) -> bool:
        return isinstance(other, SubstitutionMatrix) and np.array_equal(self.M, other.M)

    def __hash__(self) -> int:
        return hash(self.M.tobytes())

    def __repr__(self) -> str:
        return f"SubstitutionMatrix({self.M.tolist()})"

    def to_json(self) -> str:
        return json.dumps({"M": self.M.tolist()})

    @classmethod
    def from_json(cls, text: str) -> "SubstitutionMatrix":
        data = json.loads(text)
        return cls(data["M"])


@dataclass(frozen=True)
class OffspringConfig:
    """One offspring configuration: counts per label, stored sparsely.

    ``items`` is the canonical form: a tuple of (label, count) pairs sorted by
    label with zero counts dropped, which makes configs hashable and
    order-independent to construct.
    """

    items: tuple = ()

    @classmethod
    def from_counts(cls, counts) -> "OffspringConfig":
        """Build from a dense sequence or a {label: count} mapping."""
        if hasattr(counts, "items"):
            pairs = counts.items()
        else:
            pairs = enumerate(counts)
        canon = []
        for label, count in pairs:
            label = int(label)
            count = int(count)
            if label < 0 or count < 0:
                raise ValueError("labels and counts must be nonnegative")
            if count > 0:
                canon.append((label, count))
        canon.sort()
        return cls(tuple(canon))

    @property
    def norm(self) -> int:
        """Total number of forward neighbors ||s||."""
        return sum(c for _, c in self.items)

    def dense(self, n_labels: int) -> np.ndarray:
        out = np.zeros(n_labels, dtype=np.int64)
        for label, count in self.items:
            if label >= n_labels:
                raise ValueError(f"label {label} outside alphabet of size {n_labels}")
            out[label] = count
        return out

    def __str__(self) -> str:
        return "{" + ", ".join(f"{l}: {c}" for l, c in self.items) + "}"


@dataclass
class ValidationReport:
    """Outcome of validate_process: carries failures instead of raising."""

    ok: bool
    normalization_defect: list = field(default_factory=list)
    f_violations: list = field(default_factory=list)   # (label, config, prob)
    support_sizes: list = field(default_factory=list)
    messages: list = field(default_factory=list)


class BranchingProcess:
    """Finite-support multi-type offspring law: per label, [(config, prob)].

    Construction validates probabilities (see NORM_TOL / NORM_RENORM) and
    merges duplicate configurations.  Configurations with ||s|| = 0 are
    allowed here so that validate_process can report them; the samplers
    reject laws that violate the at-least-one-child condition.
    """

    def __init__(self, n_labels: int, offspring) -> None:
        if n_labels < 1:
            raise ValueError("need at least one label")
        if len(offspring) != n_labels:
            raise ValueError("offspring table must have one entry per label")
        table = []
        for j, entries in enumerate(offspring):
            if not entries:
                raise ValueError(f"label {j} has empty offspring list")
            merged: dict[OffspringConfig, float] = {}
            for config, prob in entries:
                if not isinstance(config, OffspringConfig):
                    config = OffspringConfig.from_counts(config)
                prob = float(prob)
                if prob <= 0.0:
                    raise ValueError("probabilities must be positive")
                if any(label >= n_labels for label, _ in config.items):
                    raise ValueError("config uses labels outside the alphabet")
                merged[config] = merged.get(config, 0.0) + prob
            total = math.fsum(merged.values())
            defect = abs(total - 1.0)
            if defect > NORM_RENORM:
                raise ValueError(
                    f"label {j}: probabilities sum to {total}, defect {defect:.3e}")
            if defect > NORM_TOL:
                warnings.warn(
                    f"label {j}: renormalizing probabilities (defect {defect:.3e})",
                    stacklevel=2)
                merged = {c: p / total for c, p in merged.items()}
            table.append(tuple(sorted(merged.items(), key=lambda cp: cp[0].items)))
        self.n_labels = n_labels
        self.table = tuple(table)

    def support(self, label: int):
        """Configurations with positive probability for ``label``."""
        return tuple(config for config, _ in self.table[label])

    def satisfies_condition_f(self) -> bool:
        """True iff every configuration has at least one forward neighbor."""
        return all(config.norm >= 1
                   for entries in self.table for config, _ in entries)

    def max_branch(self) -> int:
        return max(config.norm for entries in self.table for config, _ in entries)

    def mean_matrix(self) -> np.ndarray:
        """A[j][k] = expected number of label-k children of a label-j vertex."""
        A = np.zeros((self.n_labels, self.n_labels))
        for j, entries in enumerate(self.table):
            for config, prob in entries:
                A[j] += prob * config.dense(self.n_labels)
        return A

    def __eq__(self, other) -> bool:
        return (isinstance(other, BranchingProcess)
                and self.n_labels == other.n_labels
                and self.table == other.table)

    def __repr__(self) -> str:
        parts = []
        for j, entries in enumerate(self.table):
            body = ", ".join(f"{config}: {prob:g}" for config, prob in entries)
            parts.append(f"label {j}: [{body}]")
        return "BranchingProcess(" + "; ".join(parts) + ")"

    # ---- serialization (dense JSON schema) ----

    def to_json(self) -> str:
        offspring = []
        for entries in self.table:
            offspring.append([
                {"config": config.dense(self.n_labels).tolist(), "prob": prob}
                for config, prob in entries
            ])
        return json.dumps({"labels": self.n_labels, "offspring": offspring})

    @classmethod
    def from_json(cls, text: str) -> "BranchingProcess":
        data = json.loads(text)
        n_labels = int(data["labels"])
        offspring = [
            [(OffspringConfig.from_counts(e["config"]), e["prob"]) for e in entries]
            for entries in data["offspring"]
        ]
        return cls(n_labels, offspring)

    # ---- flat tables for the sampling kernels ----

    def sampling_tables(self):
        """(cfg_counts, cfg_cum, cfg_ptr) in the layout the kernels expect.

        cfg_counts[i] is the dense count row of the i-th configuration;
        configurations of label j occupy rows cfg_ptr[j]:cfg_ptr[j+1], and
        cfg_cum holds per-label cumulative probabilities ending at ~1.
        """
        cached = getattr(self, "_tables", None)
        if cached is not None:
            return cached
        rows, cums, ptr = [], [], [0]
        for entries in self.table:
            running = 0.0
            for config, prob in entries:
                rows.append(config.dense(self.n_labels))
                running += prob
                cums.append(running)
            cums[-1] = 1.0  # guard the searchsorted upper edge
            ptr.append(len(rows))
        tables = (np.array(rows, dtype=np.int64),
                  np.array(cums, dtype=np.float64),
                  np.array(ptr, dtype=np.int64))
        for arr in tables:
            arr.setflags(write=False)
        self._tables = tables
        return tables


def validate_process(b: BranchingProcess) -> ValidationReport:
    """Check normalization and the at-least-one-child condition, per label."""
    defects, violations, sizes, messages = [], [], [], []
    ok = True
    for j, entries in enumerate(b.table):
        total = math.fsum(prob for _, prob in entries)
        defect = abs(total - 1.0)
        defects.append(defect)
        sizes.append(len(entries))
        if defect > NORM_TOL:
            ok = False
            messages.append(f"label {j}: normalization defect {defect:.3e}")
        for config, prob in entries:
            if config.norm == 0:
                ok = False
                violations.append((j, config, prob))
                messages.append(
                    f"label {j}: config with no children at prob {prob:g}")
    return ValidationReport(ok=ok, normalization_defect=defects,
                            f_violations=violations, support_sizes=sizes,
                            messages=messages)


def deterministic_process(M: SubstitutionMatrix) -> BranchingProcess:
    """The law concentrated on the rows of M (periodic tree)."""
    offspring = [[(OffspringConfig.from_counts(M.M[j]), 1.0)] for j in range(M.L)]
    return BranchingProcess(M.L, offspring)


def dp_distance(b1: BranchingProcess, b2: BranchingProcess, p: float) -> float:
    """max_j sum_s |P_j^1(s) - P_j^2(s)| * ||s||^p over the union of supports."""
    if b1.n_labels != b2.n_labels:
        raise ValueError("laws live on different label alphabets")
    worst = 0.0
    for j in range(b1.n_labels):
        law1 = dict(b1.table[j])
        law2 = dict(b2.table[j])
        total = math.fsum(
            abs(law1.get(s, 0.0) - law2.get(s, 0.0)) * float(s.norm) ** p
            for s in set(law1) | set(law2))
        worst = max(worst, total)
    return worst


def moment_p(b: BranchingProcess, p: float) -> np.ndarray:
    """Per-label p-th moment of the offspring count: sum_s P_j(s) ||s||^p."""
    return np.array([
        math.fsum(prob * float(config.norm) ** p for config, prob in entries)
        for entries in b.table
    ])


def percolation_process(K: int, p_keep: float) -> BranchingProcess:
    """Single-label law: one child always kept, each of the other K-1 kept
    independently with probability p_keep, so ||s|| = 1 + Binomial(K-1, p_keep).
    """
    if K < 2:
        raise ValueError("need K >= 2")
    if not 0.0 < p_keep <= 1.0:
        raise ValueError("p_keep must lie in (0, 1]")
    entries = []
    for m in range(K):
        prob = math.comb(K - 1, m) * p_keep ** m * (1.0 - p_keep) ** (K - 1 - m)
        if prob > 0.0:
            entries.append((OffspringConfig.from_counts([1 + m]), prob))
    return BranchingProcess(1, [entries])


def percolation_pk_gap(K: int, improved: bool) -> float:
    """Float64 of (1 - bound^(K-1))-style gap term, i.e. 1 - bound, computed
    in the log domain with math.lgamma/log1p/expm1.  Serves as the independent
    cross-check of percolation_pk_bound (which works in high precision).
    """
    if K < 2:
        raise ValueError("need K >= 2")
    # log of the subtracted term t with bound = (1 - t)^(1/(K-1))
    if improved:
        log_t = -33.0 * math.log(2.0) - 22.0 * math.log(K)
    else:
        log_t = (-32.0 * math.log(2.0) - 22.0 * math.log(K)
                 - math.lgamma(2.0 * K))
    # 1 - (1-t)^(1/(K-1)) = -expm1(log1p(-t)/(K-1))
    t = math.exp(log_t)
    return -math.expm1(math.log1p(-t) / (K - 1))


def percolation_pk_bound(K: int, improved: bool) -> mpmath.mpf:
    """Retention-probability threshold bound, as an mpmath float.

    Evaluates (1 - 2^-32 K^-22 / (2K-1)!)^(1/(K-1)), or with the last factor's
    (2K-1)! replaced by 2 in the improved variant (so the subtracted term is
    larger and the bound strictly smaller).  The gap 1 - bound underflows
    float64 already for moderate K, hence the high-precision return type; use
    percolation_pk_gap for a float64 view of 1 - bound.
    """
    if K < 2:
        raise ValueError("need K >= 2")
    with mpmath.workdps(60):
        Km = mpmath.mpf(K)
        t = mpmath.power(2, -32) * mpmath.power(Km, -22)
        if improved:
            t = t / 2
        else:
            t = t / mpmath.factorial(2 * K - 1)
        bound = mpmath.power(1 - t, mpmath.mpf(1) / (K - 1))
        return +bound
