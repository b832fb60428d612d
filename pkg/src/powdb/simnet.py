"""Deterministic simulation substrate: virtual clock, event queue, in-memory
transport with seeded latency/loss and partition windows, virtual-time miner.

Everything runs single-threaded over one event queue; ties in time are
broken by insertion order, so a run is a pure function of its inputs.
"""

from __future__ import annotations

import heapq
import random

from powdb.consensus import mine_block


class EventQueue:
    """Min-heap of (time, seq, fn); `now` only moves forward."""

    def __init__(self):
        self.now = 0
        self._heap: list = []
        self._seq = 0
        self.processed = 0

    def at(self, t_ms: int, fn) -> None:
        heapq.heappush(self._heap, (max(t_ms, self.now), self._seq, fn))
        self._seq += 1

    def after(self, delay_ms: int, fn) -> None:
        self.at(self.now + max(0, delay_ms), fn)

    def __len__(self) -> int:
        return len(self._heap)

    def run(self, max_events: int = 5_000_000) -> None:
        """Drain the queue completely."""
        while self._heap:
            t, _seq, fn = heapq.heappop(self._heap)
            self.now = t
            fn()
            self.processed += 1
            if self.processed > max_events:
                raise RuntimeError(f"simulation exceeded {max_events} events")

    def run_until(self, t_ms: int, max_events: int = 5_000_000) -> None:
        """Process every event with time <= t_ms."""
        while self._heap and self._heap[0][0] <= t_ms:
            t, _seq, fn = heapq.heappop(self._heap)
            self.now = t
            fn()
            self.processed += 1
            if self.processed > max_events:
                raise RuntimeError(f"simulation exceeded {max_events} events")
        self.now = max(self.now, t_ms)


class MemConnection:
    """One direction-pair endpoint of an in-memory link."""

    def __init__(self, network: "MemNetwork", local_addr: str, remote_addr: str, owner):
        self.network = network
        self.local_addr = local_addr
        self.remote_addr = remote_addr
        self.owner = owner  # receives on_message / on_disconnect for this side
        self.peer: "MemConnection | None" = None
        self.closed = False
        self.label = f"{local_addr}->{remote_addr}"

    def send_message(self, message: bytes) -> None:
        if self.closed or self.peer is None or self.peer.closed:
            raise ConnectionError(f"connection {self.label} is closed")
        self.network.deliver(self, self.peer, message)

    def close(self) -> None:
        if self.closed:
            return
        self.closed = True
        peer = self.peer
        if peer is not None and not peer.closed:
            peer.closed = True
            self.network.queue.after(
                self.network.latency_ms, lambda: peer.owner.on_disconnect(peer))

    def __repr__(self) -> str:
        return f"<MemConnection {self.label}>"


class MemNetwork:
    """Address-routed message transport with partitions, latency and loss.

    Partition semantics: messages crossing group boundaries are silently
    dropped (the sender observes success); in-group delivery is untouched.
    """

    def __init__(self, queue: EventQueue, rng: random.Random,
                 latency_ms: int = 10, loss_rate: float = 0.0):
        self.queue = queue
        self.rng = rng
        self.latency_ms = latency_ms
        self.loss_rate = loss_rate
        self._listeners: dict[str, object] = {}
        self._groups: list[set[str]] | None = None
        self.dropped_by_partition = 0
        self.dropped_by_loss = 0

    def listen(self, addr: str, owner) -> None:
        if addr in self._listeners:
            raise ValueError(f"address {addr} already bound")
        self._listeners[addr] = owner

    def dial(self, src_owner, src_addr: str, dst_addr: str) -> MemConnection | None:
        dst_owner = self._listeners.get(dst_addr)
        if dst_owner is None:
            return None
        near = MemConnection(self, src_addr, dst_addr, src_owner)
        far = MemConnection(self, dst_addr, src_addr, dst_owner)
        near.peer, far.peer = far, near
        self.queue.after(self.latency_ms, lambda: dst_owner.on_inbound_connection(far))
        return near

    def reachable(self, addr_a: str, addr_b: str) -> bool:
        if self._groups is None:
            return True
        for group in self._groups:
            if addr_a in group:
                return addr_b in group
        return False

    def deliver(self, src: MemConnection, dst: MemConnection, message: bytes) -> None:
        if not self.reachable(src.local_addr, dst.local_addr):
            self.dropped_by_partition += 1
            return
        if self.loss_rate > 0 and self.rng.random() < self.loss_rate:
            self.dropped_by_loss += 1
            return

        def arrive():
            if not dst.closed and self.reachable(src.local_addr, dst.local_addr):
                dst.owner.on_message(dst, message)

        self.queue.after(self.latency_ms, arrive)

    def set_partition(self, groups: list[set[str]]) -> None:
        seen: set[str] = set()
        for group in groups:
            if seen & group:
                raise ValueError("partition groups overlap")
            seen |= group
        self._groups = [set(g) for g in groups]

    def heal(self) -> None:
        self._groups = None

    @property
    def partitioned(self) -> bool:
        return self._groups is not None


class _SimMiningHandle:
    def __init__(self):
        self.finished = False
        self._on_cancel = None

    def cancel(self) -> None:
        if not self.finished:
            self.finished = True
            if self._on_cancel is not None:
                self._on_cancel()


class SimMiner:
    """Mines the real nonce immediately, completes after a virtual delay.

    The delay is the attempt count of the actual search divided by the
    configured hash rate, so inter-block times follow the same distribution
    a live miner of that speed would produce.
    """

    def __init__(self, queue: EventQueue, attempts_per_ms: float):
        if attempts_per_ms <= 0:
            raise ValueError("hash rate must be positive")
        self.queue = queue
        self.attempts_per_ms = attempts_per_ms

    def start(self, block, done) -> _SimMiningHandle:
        mined = mine_block(block)
        delay = max(1, round((mined.nonce + 1) / self.attempts_per_ms))
        handle = _SimMiningHandle()

        def complete():
            if not handle.finished:
                handle.finished = True
                done(mined)

        handle._on_cancel = lambda: self.queue.after(0, lambda: done(None))
        self.queue.after(delay, complete)
        return handle
