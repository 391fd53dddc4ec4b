"""Transport between cores and memory controllers.

Two interchangeable models: a per-core latency/bandwidth link pair, and an
input-queued crossbar moving one flit per port per cycle with rotating
round-robin grants.  Both preserve per-source FIFO order and honor
controller backpressure by holding traffic in the network.
"""

from __future__ import annotations

from collections import deque

from .config import NocConfig
from .dram import DramSystem, MemoryRequest


def request_wire_bytes(req: MemoryRequest, cfg: NocConfig, access_bytes: int) -> int:
    """Bytes a request occupies on the forward path (writes carry payload)."""
    return cfg.header_bytes + (access_bytes if req.is_write else 0)


def response_wire_bytes(cfg: NocConfig, access_bytes: int) -> int:
    return cfg.header_bytes + access_bytes


class SimpleNoc:
    """Configurable-latency links, one request and one response link per core."""

    def __init__(self, cfg: NocConfig, num_cores: int, access_bytes: int):
        self.cfg = cfg
        self.access_bytes = access_bytes
        self.fwd_free = [0] * num_cores
        self.ret_free = [0] * num_cores
        self.fwd_q: list[deque] = [deque() for _ in range(num_cores)]  # (delivery, req)
        self.ret_q: list[deque] = [deque() for _ in range(num_cores)]
        self.pending: dict[int, deque] = {}  # channel -> requests awaiting ingress
        self.bytes_moved = 0
        self.inflight = 0

    def push_request(self, req: MemoryRequest, now: int) -> None:
        nbytes = request_wire_bytes(req, self.cfg, self.access_bytes)
        start = max(now, self.fwd_free[req.core_id])
        delivery = start + self.cfg.latency_cycles
        self.fwd_free[req.core_id] = start + -(-nbytes // self.cfg.bytes_per_cycle)
        self.fwd_q[req.core_id].append((delivery, req))
        self.bytes_moved += nbytes
        self.inflight += 1

    def push_response(self, req: MemoryRequest, now: int) -> None:
        nbytes = response_wire_bytes(self.cfg, self.access_bytes)
        start = max(now, self.ret_free[req.core_id])
        delivery = start + self.cfg.latency_cycles
        self.ret_free[req.core_id] = start + -(-nbytes // self.cfg.bytes_per_cycle)
        self.ret_q[req.core_id].append((delivery, req))
        self.bytes_moved += nbytes
        self.inflight += 1

    def step_forward(self, now: int, dram: DramSystem, dram_tick: int) -> list[MemoryRequest]:
        accepted: list[MemoryRequest] = []
        for q in self.fwd_q:
            while q and q[0][0] <= now:
                _, req = q.popleft()
                ch = dram.channel_of(req.addr)
                self.pending.setdefault(ch, deque()).append(req)
        for ch in sorted(self.pending):
            pq = self.pending[ch]
            while pq and dram.try_enqueue(pq[0], dram_tick):
                accepted.append(pq.popleft())
                self.inflight -= 1
        return accepted

    def step_return(self, now: int) -> list[tuple[int, MemoryRequest]]:
        out: list[tuple[int, MemoryRequest]] = []
        for q in self.ret_q:
            while q and q[0][0] <= now:
                d, req = q.popleft()
                out.append((max(d, now + 1), req))
                self.inflight -= 1
        return out

    def busy(self) -> bool:
        return self.inflight > 0

    def next_event(self, now: int) -> int | None:
        best = None
        for q in self.fwd_q:
            if q:
                best = q[0][0] if best is None else min(best, q[0][0])
        for q in self.ret_q:
            if q:
                best = q[0][0] if best is None else min(best, q[0][0])
        for pq in self.pending.values():
            if pq:
                best = now + 1 if best is None else min(best, now + 1)
        return best


class _Port:
    """Input port of one crossbar: FIFO of (dest, flits_left, req)."""

    __slots__ = ("q",)

    def __init__(self):
        self.q: deque = deque()


class _Crossbar:
    """Single-stage input-queued crossbar, one flit per port per cycle."""

    __slots__ = ("n_in", "n_out", "ports", "rr", "flits_moved", "inflight")

    def __init__(self, n_in: int, n_out: int):
        self.n_in = n_in
        self.n_out = n_out
        self.ports = [_Port() for _ in range(n_in)]
        self.rr = [0] * n_out  # round-robin pointer per output
        self.flits_moved = 0
        self.inflight = 0

    def inject(self, src: int, dest: int, flits: int, req: MemoryRequest) -> None:
        self.ports[src].q.append([dest, flits, req])
        self.inflight += 1

    def step(self, blocked_outputs: set[int]) -> list[tuple[int, MemoryRequest]]:
        """One arbitration cycle; returns (output, request) tail deliveries."""
        delivered: list[tuple[int, MemoryRequest]] = []
        heads: dict[int, list[int]] = {}
        for i, port in enumerate(self.ports):
            if port.q:
                heads.setdefault(port.q[0][0], []).append(i)
        for out, inputs in heads.items():
            if out in blocked_outputs:
                continue
            ptr = self.rr[out]
            pick = min(inputs, key=lambda i: ((i - ptr) % self.n_in))
            entry = self.ports[pick].q[0]
            entry[1] -= 1
            self.flits_moved += 1
            self.rr[out] = (pick + 1) % self.n_in
            if entry[1] == 0:
                self.ports[pick].q.popleft()
                self.inflight -= 1
                delivered.append((out, entry[2]))
        return delivered

    def busy(self) -> bool:
        return self.inflight > 0


class CrossbarNoc:
    """Request crossbar (cores x channels) plus a symmetric return crossbar."""

    def __init__(self, cfg: NocConfig, num_cores: int, num_channels: int,
                 access_bytes: int, channel_of):
        self.cfg = cfg
        self.access_bytes = access_bytes
        self.channel_of = channel_of
        self.fwd = _Crossbar(num_cores, num_channels)
        self.ret = _Crossbar(num_channels, num_cores)
        self.undelivered: dict[int, deque] = {}  # channel -> blocked tail requests
        self.bytes_moved = 0

    def _flits(self, nbytes: int) -> int:
        return max(1, -(-nbytes // self.cfg.flit_bytes))

    def push_request(self, req: MemoryRequest, now: int) -> None:
        nbytes = request_wire_bytes(req, self.cfg, self.access_bytes)
        self.bytes_moved += nbytes
        self.fwd.inject(req.core_id, self.channel_of(req.addr), self._flits(nbytes), req)

    def push_response(self, req: MemoryRequest, now: int) -> None:
        nbytes = response_wire_bytes(self.cfg, self.access_bytes)
        self.bytes_moved += nbytes
        self.ret.inject(self.channel_of(req.addr), req.core_id, self._flits(nbytes), req)

    def step_forward(self, now: int, dram: DramSystem, dram_tick: int) -> list[MemoryRequest]:
        accepted: list[MemoryRequest] = []
        # Retry tails blocked by earlier backpressure first (FIFO per channel).
        for ch in sorted(self.undelivered):
            dq = self.undelivered[ch]
            while dq and dram.try_enqueue(dq[0], dram_tick):
                accepted.append(dq.popleft())
        blocked = {ch for ch, dq in self.undelivered.items() if dq}
        blocked.update(ch for ch in range(self.fwd.n_out)
                       if not dram.channels[ch].can_enqueue())
        for ch, req in self.fwd.step(blocked):
            if dram.try_enqueue(req, dram_tick):
                accepted.append(req)
            else:
                self.undelivered.setdefault(ch, deque()).append(req)
        return accepted

    def step_return(self, now: int) -> list[tuple[int, MemoryRequest]]:
        return [(now + 1, req) for _, req in self.ret.step(set())]

    def busy(self) -> bool:
        return (self.fwd.busy() or self.ret.busy()
                or any(dq for dq in self.undelivered.values()))

    def next_event(self, now: int) -> int | None:
        return now + 1 if self.busy() else None


def make_noc(cfg: NocConfig, num_cores: int, num_channels: int,
             access_bytes: int, channel_of):
    if cfg.model == "simple":
        return SimpleNoc(cfg, num_cores, access_bytes)
    return CrossbarNoc(cfg, num_cores, num_channels, access_bytes, channel_of)
