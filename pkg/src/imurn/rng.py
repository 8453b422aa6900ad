"""Counter-based uniform streams.

Every uniform used by the engines is a pure function of
``(replication key, step, slot)``.  A replication therefore produces the same
numbers whether it runs alone, inside a vectorised batch, or in another
process, which is what makes replication results independent of scheduling.

The mixer is the SplitMix64 finaliser applied twice (once to fold in the step,
once to fold in the slot).  A pure-Python scalar path and a numpy array path
are provided; both implement the same 64-bit integer arithmetic and return
bit-identical doubles.
"""

from __future__ import annotations

import numpy as np

MASK64 = (1 << 64) - 1

_GOLDEN = 0x9E3779B97F4A7C15
_SLOT_MUL = 0xD1B54A32D192ED03
_REP_MUL = 0xAEF17502108EF2D9
_M1 = 0xBF58476D1CE4E5B9
_M2 = 0x94D049BB133111EB
_INV_2_53 = 1.0 / 9007199254740992.0

# slot layout: purpose in the high bits, index in the low 40 bits
_SLOT_SHIFT = 40
DRAW = 0
OUTCOME = 1
DELAY = 2


def slot(purpose: int, index: int = 0) -> int:
    return (purpose << _SLOT_SHIFT) | index


def mix64(x: int) -> int:
    x &= MASK64
    x = ((x ^ (x >> 30)) * _M1) & MASK64
    x = ((x ^ (x >> 27)) * _M2) & MASK64
    return x ^ (x >> 31)


def check_seed(seed: int) -> int:
    seed = int(seed)
    if not 0 <= seed <= MASK64:
        raise ValueError(f"seed must be an unsigned 64-bit integer, got {seed}")
    return seed


def replication_key(master_seed: int, replication: int) -> int:
    """Derive the stream key of one replication from the master seed."""
    base = mix64(check_seed(master_seed))
    return mix64(base + (int(replication) + 1) * _REP_MUL)


def replication_keys(master_seed: int, replications) -> np.ndarray:
    return np.array(
        [replication_key(master_seed, r) for r in replications], dtype=np.uint64
    )


def uniform(key: int, step: int, slot_id: int) -> float:
    """Scalar uniform on [0, 1)."""
    h = mix64(key + (step + 1) * _GOLDEN)
    h = mix64(h + (slot_id + 1) * _SLOT_MUL)
    return (h >> 11) * _INV_2_53


_U_GOLDEN = np.uint64(_GOLDEN)
_U_SLOT_MUL = np.uint64(_SLOT_MUL)
_U_M1 = np.uint64(_M1)
_U_M2 = np.uint64(_M2)
_S30 = np.uint64(30)
_S27 = np.uint64(27)
_S31 = np.uint64(31)
_S11 = np.uint64(11)


def _mix64_array(x: np.ndarray) -> np.ndarray:
    x = (x ^ (x >> _S30)) * _U_M1
    x = (x ^ (x >> _S27)) * _U_M2
    return x ^ (x >> _S31)


def _weyl(counter, mul: int, umul: np.uint64):
    if np.ndim(counter) == 0:
        return np.uint64(((int(counter) + 1) * mul) & MASK64)
    # uint64 array arithmetic wraps modulo 2**64, matching the scalar path
    return (np.asarray(counter, dtype=np.uint64) + np.uint64(1)) * umul


def uniforms(keys, step, slot_id) -> np.ndarray:
    """Vectorised :func:`uniform`; ``keys``, ``step`` and ``slot_id`` broadcast."""
    keys = np.asarray(keys, dtype=np.uint64)
    h = _mix64_array(keys + _weyl(step, _GOLDEN, _U_GOLDEN))
    h = _mix64_array(h + _weyl(slot_id, _SLOT_MUL, _U_SLOT_MUL))
    return (h >> _S11).astype(np.float64) * _INV_2_53
