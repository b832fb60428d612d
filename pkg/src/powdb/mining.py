"""Mining backend selection and the batched nonce-search driver.

The compiled kernel is preferred when the extension built; otherwise the
hashlib fallback is used. `POWDB_PURE=1` forces the fallback, which the
benchmark uses to compare both paths.
"""

from __future__ import annotations

import os

from powdb._minepure import search_nonce as _pure_search

if os.environ.get("POWDB_PURE") == "1":
    _search = _pure_search
    BACKEND = "pure"
else:
    try:
        from powdb._minecore import search_nonce as _core_search

        _search = _core_search
        BACKEND = "compiled"
    except ImportError:
        _search = _pure_search
        BACKEND = "pure"

MAX_NONCE = 2**64 - 1

# Nonce attempts between cancel polls. Must stay at or below 2**16 so a
# competing block can stop a miner promptly.
CANCEL_CHECK_INTERVAL = 4096


class NonceSpaceExhausted(RuntimeError):
    """The full 64-bit nonce space held no qualifying hash."""


def search_nonce(prefix: bytes, difficulty_bits: int, start_nonce: int,
                 count: int) -> tuple[int, bytes] | None:
    """One search window on the selected backend."""
    return _search(prefix, difficulty_bits, start_nonce, count)


def find_nonce(prefix: bytes, difficulty_bits: int, cancel=None,
               batch: int = CANCEL_CHECK_INTERVAL) -> tuple[int, bytes] | None:
    """Search nonces from 0 upward; returns (nonce, digest) or None on cancel.

    `cancel` is anything with an `is_set()` method (a threading.Event in the
    live node); it is polled between batches, never mid-batch.
    """
    if not 0 < batch <= 2**16:
        raise ValueError("batch must be in (0, 65536]")
    nonce = 0
    while True:
        if cancel is not None and cancel.is_set():
            return None
        window = min(batch, MAX_NONCE - nonce + 1)
        hit = _search(prefix, difficulty_bits, nonce, window)
        if hit is not None:
            return hit
        nonce += window
        if nonce > MAX_NONCE:
            raise NonceSpaceExhausted(
                f"no nonce meets {difficulty_bits} bits for this prefix")
