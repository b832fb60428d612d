"""Block creation, mining, verification, difficulty retargeting and fork choice."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from enum import Enum

from powdb import mining
from powdb.chain import (
    Block,
    ChainParams,
    MalformedBlockError,
    SEP_CHAR,
    block_hash,
    cumulative_work,
    genesis_block,
    meets_difficulty,
    mining_prefix_bytes,
    validate_block_shape,
)


class VerifyReason(Enum):
    WRONG_INDEX = "WrongIndex"
    PREV_HASH_MISMATCH = "PrevHashMismatch"
    HASH_MISMATCH = "HashMismatch"
    INSUFFICIENT_WORK = "InsufficientWork"
    MALFORMED_BLOCK = "MalformedBlock"


@dataclass(frozen=True)
class VerifyError:
    reason: VerifyReason
    detail: str = ""

    def __str__(self) -> str:
        return f"{self.reason.value}: {self.detail}" if self.detail else self.reason.value


@dataclass(frozen=True)
class DifficultyState:
    """Real-valued difficulty plus the retarget inputs.

    The difficulty stays a float between retargets because integer bits would
    quantize the multiplicative update too coarsely; it is rounded to whole
    bits only when a block is actually mined or checked.
    """

    d_current: float
    t_target_ms: int
    t_actual_last_ms: int | None = None

    def effective_bits(self) -> int:
        return effective_bits(self.d_current)


def effective_bits(d: float) -> int:
    """Round to nearest whole bits, ties upward."""
    return math.floor(d + 0.5)


def retarget_raw(d_current: float, t_target_ms: float, t_actual_ms: float) -> float:
    """The bare retarget product: new = current * target/actual."""
    return d_current * (t_target_ms / t_actual_ms)


def adjust_difficulty(state: DifficultyState, params: ChainParams) -> DifficultyState:
    """Apply one retarget step with the per-step clamp and the bit bounds.

    A measured interval of zero (two blocks in the same second) is clamped up
    to 1 ms, which drives the factor to the upper clamp.
    """
    t_actual = state.t_actual_last_ms if state.t_actual_last_ms is not None else state.t_target_ms
    t_actual = max(1, t_actual)
    lo, hi = params.retarget_clamp
    factor = min(max(state.t_target_ms / t_actual, lo), hi)
    d_new = min(max(state.d_current * factor, float(params.min_difficulty)),
                float(params.max_difficulty))
    return replace(state, d_current=d_new, t_actual_last_ms=t_actual)


def difficulty_after_append(state: DifficultyState, new_block: Block,
                            prev_block: Block, params: ChainParams) -> DifficultyState:
    """Retarget after appending `new_block` on top of `prev_block`.

    The interval against the hard-coded genesis is not a mining-time sample,
    so the first retarget happens once two mined blocks exist.
    """
    if prev_block.index == 0:
        return state
    t_actual_ms = (new_block.timestamp - prev_block.timestamp) * 1000
    return adjust_difficulty(replace(state, t_actual_last_ms=max(1, t_actual_ms)), params)


def replay_difficulty(blocks: list[Block], params: ChainParams) -> DifficultyState:
    """Recompute the difficulty state a node holds after adopting `blocks`.

    Deterministic across nodes because intervals come from block timestamps,
    never local receipt times.
    """
    state = DifficultyState(float(params.initial_difficulty),
                            params.target_block_interval_ms)
    for i in range(1, len(blocks)):
        state = difficulty_after_append(state, blocks[i], blocks[i - 1], params)
    return state


def create_new_block(data: str, head: Block, difficulty: int, timestamp: int) -> Block:
    """Construct the unmined successor of `head`; hash stays empty until mined."""
    if SEP_CHAR in data:
        raise MalformedBlockError("data must not contain the 0x1f separator byte")
    return Block(index=head.index + 1, timestamp=timestamp, data=data,
                 prev_hash=head.hash, hash="", difficulty=difficulty, nonce=0)


def mine_block(block: Block, cancel=None) -> Block | None:
    """Search nonces from 0 upward until the hash meets the block's difficulty.

    Returns the mined block (smallest qualifying nonce, hash filled in) or
    None when the cancel signal fired first.
    """
    prefix = mining_prefix_bytes(block)
    hit = mining.find_nonce(prefix, block.difficulty, cancel=cancel)
    if hit is None:
        return None
    nonce, digest = hit
    return block.with_nonce(nonce).with_hash(digest.hex())


def verify_block(block: Block, current_head: Block,
                 min_difficulty: int = 1) -> VerifyError | None:
    """The four acceptance conditions, checked in a fixed order.

    Returns None when the block extends `current_head`, else the first
    failing condition so rejection reasons are deterministic.
    """
    try:
        validate_block_shape(block)
    except MalformedBlockError as exc:
        return VerifyError(VerifyReason.MALFORMED_BLOCK, str(exc))
    if block.index != current_head.index + 1:
        return VerifyError(VerifyReason.WRONG_INDEX,
                           f"expected {current_head.index + 1}, got {block.index}")
    if block.prev_hash != current_head.hash:
        return VerifyError(VerifyReason.PREV_HASH_MISMATCH,
                           f"head is {current_head.hash[:16]}..., block links {block.prev_hash[:16]}...")
    if block.hash != block_hash(block):
        return VerifyError(VerifyReason.HASH_MISMATCH, "stored hash differs from computed hash")
    if block.difficulty < min_difficulty or not meets_difficulty(block.hash, block.difficulty):
        return VerifyError(VerifyReason.INSUFFICIENT_WORK,
                           f"hash does not carry {block.difficulty} leading zero bits "
                           f"(minimum {min_difficulty})")
    return None


def verify_chain(chain: list[Block], params: ChainParams) -> VerifyError | None:
    """Full block-by-block verification from the shared genesis."""
    if not chain:
        return VerifyError(VerifyReason.MALFORMED_BLOCK, "empty chain")
    if chain[0] != genesis_block():
        return VerifyError(VerifyReason.MALFORMED_BLOCK, "genesis differs from the shared root")
    for i in range(1, len(chain)):
        err = verify_block(chain[i], chain[i - 1], params.min_difficulty)
        if err is not None:
            return VerifyError(err.reason, f"block {chain[i].index}: {err.detail}")
    return None


def choose_chain(local: list[Block], candidate: list[Block],
                 params: ChainParams) -> tuple[list[Block], VerifyError | None]:
    """Greatest cumulative work wins; ties and lesser work keep the local chain.

    Returns (selected chain, error); the error is set when the candidate
    failed verification, in which case the local chain is kept.
    """
    err = verify_chain(candidate, params)
    if err is not None:
        return local, err
    if cumulative_work(candidate) > cumulative_work(local):
        return candidate, None
    return local, None
