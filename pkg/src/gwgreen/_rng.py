"""Counter-based per-node random streams (splitmix64 finalizer).

Tree sampling must be reproducible independent of traversal order and worker
count, so instead of a stateful generator each node carries a 64-bit key:

    root key    = mix64(mix64(seed) + GOLDEN * (root_label + 1))
    child i key = mix64(node_key + GOLDEN * (i + 1))        (i = 0, 1, ...)
    config draw = ((mix64(node_key ^ UNIFORM_SALT) >> 11) * 2^-53  in [0, 1)

mix64 is the splitmix64 finalizer.  This module holds the pure-Python
reference (used for seed folding and in parity tests); the numpy and numba
kernels implement the identical arithmetic and are tested bit-for-bit against
this one.
"""

from __future__ import annotations

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15
UNIFORM_SALT = 0xD1B54A32D192ED03
SEED_FOLD_INIT = 0x8BADF00D5EEDC0DE


def mix64(x: int) -> int:
    """splitmix64 finalizer on 64-bit integers."""
    x &= MASK64
    x ^= x >> 30
    x = (x * 0xBF58476D1CE4E5B9) & MASK64
    x ^= x >> 27
    x = (x * 0x94D049BB133111EB) & MASK64
    x ^= x >> 31
    return x


def root_key(seed: int, root_label: int) -> int:
    return mix64((mix64(seed) + GOLDEN * (root_label + 1)) & MASK64)


def child_key(node_key: int, child_pos: int) -> int:
    return mix64((node_key + GOLDEN * (child_pos + 1)) & MASK64)


def unit_double(node_key: int) -> float:
    """Uniform double in [0, 1) from a node key (53 mantissa bits)."""
    return (mix64(node_key ^ UNIFORM_SALT) >> 11) * 2.0 ** -53


def fold_seed(*parts: int) -> int:
    """Deterministically fold integers (sample index, label, stage id, ...)
    into one 64-bit seed.  Used to hand every Monte-Carlo sample its own
    stream so aggregation is independent of scheduling."""
    h = SEED_FOLD_INIT
    for part in parts:
        h = mix64(((h ^ (int(part) & MASK64)) + GOLDEN) & MASK64)
    return h
