"""Shared DRAM: per-channel FR-FCFS controllers over banked row-buffer state.

Addresses are spread over channels with IPOLY hashing (GF(2) polynomial
residues of the block index), then decoded to bank/row within the channel.
Timing honors tRCD/tCL/tRAS/tWR/tRP plus data-bus serialization at the
configured per-channel peak bandwidth.  The controller clock may differ
from the core clock; callers convert at the boundary.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass

from .config import DramConfig
from .errors import ConfigError, ConsistencyFault

# Irreducible polynomials over GF(2), degree -> full coefficient mask
# (degree 4 entry is x^4 + x + 1, etc.).
IPOLY_TABLE = {
    1: 0b11,
    2: 0b111,
    3: 0b1011,
    4: 0b10011,
    5: 0b100101,
    6: 0b1000011,
    7: 0b10000011,
    8: 0b100011101,
}

_RESIDUE_BITS = 48  # supported block-index width


@dataclass(slots=True)
class MemoryRequest:
    id: int
    addr: int
    is_write: bool
    core_id: int
    tile_id: int
    instr_index: int
    node_id: str = ""
    request_id: str = ""
    issued_cycle: int = 0          # core-clock domain
    completed_cycle: int = -1      # core-clock domain, set on completion
    enq_tick: int = -1             # DRAM-clock domain, set at controller ingress


def _residues(degree: int) -> list[int]:
    """x^i mod p(x) for i in [0, _RESIDUE_BITS), as degree-bit masks."""
    poly = IPOLY_TABLE[degree]
    out = []
    r = 1
    mask = (1 << degree) - 1
    for _ in range(_RESIDUE_BITS):
        out.append(r & mask)
        r <<= 1
        if r >> degree:
            r ^= poly
    return out


class IpolyHash:
    """Channel index from a byte address via polynomial bit-folding."""

    def __init__(self, cfg: DramConfig):
        ch = cfg.channels
        if ch & (ch - 1):
            raise ConfigError("IPOLY interleaving requires a power-of-two channel count")
        self.access_bytes = cfg.access_bytes
        self.degree = ch.bit_length() - 1
        self.residues = _residues(self.degree) if self.degree else []

    def channel(self, addr: int) -> int:
        if self.degree == 0:
            return 0
        block = addr // self.access_bytes
        out = 0
        i = 0
        res = self.residues
        while block:
            if block & 1:
                out ^= res[i]
            block >>= 1
            i += 1
        return out


def ipoly_hash(addr: int, cfg: DramConfig) -> int:
    """Pure functional form of the channel hash (see IpolyHash)."""
    return IpolyHash(cfg).channel(addr)


class _Bank:
    __slots__ = ("open_row", "act_at", "rcd_ready", "ras_until",
                 "next_act_at", "wr_recover")

    def __init__(self):
        self.open_row = -1         # -1 = precharged
        self.act_at = -(1 << 30)
        self.rcd_ready = 0
        self.ras_until = 0
        self.next_act_at = 0
        self.wr_recover = 0


class _Channel:
    """One memory channel: bounded request queue, banks, command/data buses."""

    __slots__ = ("cfg", "banks", "queue", "inflight", "bus_free",
                 "bytes_done", "reads_done", "writes_done", "seq")

    def __init__(self, cfg: DramConfig):
        self.cfg = cfg
        self.banks = [_Bank() for _ in range(cfg.banks_per_channel)]
        self.queue: list[tuple[MemoryRequest, int, int]] = []  # (req, bank, row)
        self.inflight: list[tuple[int, int, MemoryRequest]] = []  # heap by done tick
        self.bus_free = 0
        self.bytes_done = 0
        self.reads_done = 0
        self.writes_done = 0
        self.seq = 0

    def can_enqueue(self) -> bool:
        return len(self.queue) < self.cfg.queue_depth

    def enqueue(self, req: MemoryRequest, tick: int, bank: int, row: int) -> None:
        req.enq_tick = tick
        self.queue.append((req, bank, row))

    def busy(self) -> bool:
        return bool(self.queue or self.inflight)

    def tick(self, now: int, done: list[tuple[int, MemoryRequest]]) -> None:
        cfg = self.cfg
        while self.inflight and self.inflight[0][0] <= now:
            t, _, req = heapq.heappop(self.inflight)
            self.bytes_done += cfg.access_bytes
            if req.is_write:
                self.writes_done += 1
            else:
                self.reads_done += 1
            done.append((t, req))

        if not self.queue:
            return
        # Pass 1 (FR): oldest request whose row is open and ready to burst.
        pick = -1
        for i, (req, bank_i, row) in enumerate(self.queue):
            bank = self.banks[bank_i]
            if bank.open_row == row and now >= bank.rcd_ready and self.bus_free <= now + cfg.tCL:
                pick = i
                break
        if pick >= 0:
            req, bank_i, row = self.queue.pop(pick)
            bank = self.banks[bank_i]
            data_start = max(now + cfg.tCL, self.bus_free)
            data_end = data_start + cfg.burst_cycles
            self.bus_free = data_end
            if req.is_write:
                bank.wr_recover = data_end + cfg.tWR
            self.seq += 1
            heapq.heappush(self.inflight, (data_end, self.seq, req))
            return
        # Pass 2 (FCFS): advance the oldest request's bank state.
        req, bank_i, row = self.queue[0]
        bank = self.banks[bank_i]
        if bank.open_row == row:
            return  # waiting on tRCD or the data bus
        if bank.open_row >= 0:
            if now >= bank.ras_until and now >= bank.wr_recover:
                bank.open_row = -1
                bank.next_act_at = now + cfg.tRP
            return
        if now >= bank.next_act_at:
            bank.open_row = row
            bank.act_at = now
            bank.rcd_ready = now + cfg.tRCD
            bank.ras_until = now + cfg.tRAS

    def next_event(self, now: int) -> int | None:
        if self.inflight:
            nxt = self.inflight[0][0]
        else:
            nxt = None
        if self.queue:
            cand = now + 1  # conservative: a command may become issuable next tick
            nxt = cand if nxt is None else min(nxt, cand)
        return nxt


class DramSystem:
    """All channels plus the address decode shared by the NoC."""

    def __init__(self, cfg: DramConfig):
        cfg.validate()
        self.cfg = cfg
        self.hash = IpolyHash(cfg)
        self.channels = [_Channel(cfg) for _ in range(cfg.channels)]
        self.enqueued = 0
        self.completed = 0
        self.node_bytes: dict[tuple[str, str], int] = {}
        self.track_node_bytes = False

    def channel_of(self, addr: int) -> int:
        return self.hash.channel(addr)

    def _decode(self, addr: int) -> tuple[int, int]:
        """(bank, row) within the channel for a byte address."""
        cfg = self.cfg
        blocks_per_row = cfg.row_bytes // cfg.access_bytes
        block = addr // cfg.access_bytes
        row_global = block // blocks_per_row
        bank = row_global % cfg.banks_per_channel
        row = row_global // cfg.banks_per_channel
        return bank, row

    def try_enqueue(self, req: MemoryRequest, tick: int) -> bool:
        """Controller ingress; False signals backpressure to the NoC."""
        ch = self.channels[self.channel_of(req.addr)]
        if not ch.can_enqueue():
            return False
        bank, row = self._decode(req.addr)
        ch.enqueue(req, tick, bank, row)
        self.enqueued += 1
        if self.track_node_bytes:
            key = (req.request_id, req.node_id)
            self.node_bytes[key] = self.node_bytes.get(key, 0) + self.cfg.access_bytes
        return True

    def tick(self, now: int) -> list[tuple[int, MemoryRequest]]:
        """Advance every channel one DRAM cycle; returns (tick, request) completions."""
        done: list[tuple[int, MemoryRequest]] = []
        for ch in self.channels:
            if ch.busy():
                ch.tick(now, done)
        self.completed += len(done)
        for t, req in done:
            if req.enq_tick < 0:
                raise ConsistencyFault(f"request {req.id} completed without ingress")
        return done

    def busy(self) -> bool:
        return any(ch.busy() for ch in self.channels)

    def next_event(self, now: int) -> int | None:
        out = None
        for ch in self.channels:
            e = ch.next_event(now)
            if e is not None and (out is None or e < out):
                out = e
        return out

    def total_bytes(self) -> int:
        return sum(ch.bytes_done for ch in self.channels)

    def per_channel_bytes(self) -> list[int]:
        return [ch.bytes_done for ch in self.channels]


def bandwidth_stats(bytes_moved: int, window_cycles: int, cfg: DramConfig) -> dict:
    """Utilization of the aggregate channel bandwidth over a window."""
    if window_cycles <= 0:
        raise ValueError("window must be nonempty")
    peak = window_cycles * cfg.channels * cfg.peak_bytes_per_cycle
    return {
        "bytes": bytes_moved,
        "utilization": bytes_moved / peak if peak else 0.0,
    }
