"""
Virtual-clock driver.

Chains are plain state machines; ``ChainNode`` binds one to a simpy
environment, produces blocks on its slot schedule and wakes processes waiting
for transaction inclusion or commit. Optional wall-clock pacing lets the same
environment back a live HTTP server.
"""

from __future__ import annotations

import threading
import time
from collections import defaultdict
from typing import Callable

import simpy

from .chain import Block, Chain, TxHandle, TxState, TxStatus, UnknownHandle

_SATISFIES = {
    TxState.INCLUDED: {TxState.INCLUDED, TxState.COMMITTED, TxState.FAILED},
    TxState.COMMITTED: {TxState.COMMITTED, TxState.FAILED},
}


class ChainNode:
    """A chain running on the simulation clock."""

    def __init__(self, env: simpy.Environment, chain: Chain):
        self.env = env
        self.chain = chain
        self._waiters: dict[bytes, list[tuple[TxState, simpy.Event]]] = defaultdict(list)
        self.block_listeners: list[Callable[[Block], None]] = []
        self.process = env.process(self._produce())

    def __repr__(self) -> str:
        return f"ChainNode({self.chain.config.seed!r})"

    @property
    def name(self) -> str:
        return self.chain.config.seed

    @property
    def chain_id(self) -> bytes:
        return self.chain.chain_id

    def _produce(self):
        cfg = self.chain.config
        k = 1
        while True:
            slot = cfg.genesis_timestamp + k * cfg.inter_block_time
            k += 1
            if slot > self.env.now:
                yield self.env.timeout(slot - self.env.now)
            block = self.chain.produce_block(slot)
            if block is None:
                continue
            for listener in self.block_listeners:
                listener(block)
            self._wake()

    def _wake(self) -> None:
        for tx_hash in list(self._waiters):
            handle = TxHandle(self.chain.chain_id, tx_hash)
            status = self.chain.commit_status(handle)
            remaining = []
            for wanted, event in self._waiters[tx_hash]:
                if status.state in _SATISFIES[wanted]:
                    event.succeed(status)
                else:
                    remaining.append((wanted, event))
            if remaining:
                self._waiters[tx_hash] = remaining
            else:
                del self._waiters[tx_hash]

    def wait_for(self, handle: TxHandle, state: TxState) -> simpy.Event:
        """Event fired with the ``TxStatus`` once ``handle`` reaches ``state``.

        FAILED satisfies either wait, so callers must inspect the status.
        """
        if handle.chain_id != self.chain.chain_id:
            raise UnknownHandle("handle belongs to another chain")
        event = self.env.event()
        status = self.chain.commit_status(handle)
        if status.state in _SATISFIES[state]:
            event.succeed(status)
        else:
            self._waiters[handle.tx_hash].append((state, event))
        return event

    def query_latest(self, latency: float, timeout: float):
        """Process returning the latest header, or None once ``timeout`` expires."""
        start = self.env.now
        if self.chain.reachable and latency < timeout:
            yield self.env.timeout(latency)
            if self.chain.reachable:
                return self.chain.latest_block()
        remaining = timeout - (self.env.now - start)
        if remaining > 0:
            yield self.env.timeout(remaining)
        return None

    def submit(self, tx) -> TxHandle:
        return self.chain.submit(tx)

    def status(self, handle: TxHandle) -> TxStatus:
        return self.chain.commit_status(handle)


class Pacer:
    """Advance a simpy environment in step with the wall clock.

    ``speed`` virtual seconds elapse per wall second. All access to simulation
    state from other threads must hold ``lock``.
    """

    def __init__(self, env: simpy.Environment, speed: float = 1.0, step: float = 0.05):
        self.env = env
        self.speed = speed
        self.step = step
        self.lock = threading.RLock()
        self._stop = threading.Event()
        self._thread: threading.Thread | None = None

    def start(self) -> None:
        self._thread = threading.Thread(target=self._run, name="sim-pacer", daemon=True)
        self._thread.start()

    def stop(self) -> None:
        self._stop.set()
        if self._thread is not None:
            self._thread.join()

    def _run(self) -> None:
        origin_wall = time.monotonic()
        origin_sim = self.env.now
        while not self._stop.is_set():
            target = origin_sim + (time.monotonic() - origin_wall) * self.speed
            with self.lock:
                if target > self.env.now:
                    self.env.run(until=target)
            self._stop.wait(self.step)
