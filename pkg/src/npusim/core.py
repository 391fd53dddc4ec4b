"""Cycle-level model of one NPU core.

A core runs up to two tiles concurrently: scratchpad and accumulator are
each split into two partitions bound alternately to incoming tiles, so one
tile's DMA overlaps the other's compute.  A tile's slot frees once all of
its instructions have issued; its partition frees only when they have all
completed.  Systolic and vector latencies are deterministic closed forms;
MVIN/MVOUT are split into DRAM-granularity requests handed to the NoC.
"""

from __future__ import annotations

import heapq
from collections import deque

from .config import CoreConfig, SimConfig
from .dram import MemoryRequest
from .errors import (
    BlockTooTallError,
    ConsistencyFault,
    FootprintError,
    MissingLatencyError,
)
from .lowering import Instruction, TileProgram

COMPUTE_OPCODES = ("GEMM_PRELOAD", "GEMM", "VECTOR", "IM2COL")


def systolic_compute_latency(m_rows: int, cfg: CoreConfig) -> int:
    """Weight-stationary array: rows streamed plus fill/drain skew."""
    return m_rows + cfg.array_w + cfg.array_h - 1


def preload_latency(k_rows: int, cfg: CoreConfig) -> int:
    """One weight row shifts into the array per cycle."""
    if k_rows > cfg.array_h:
        raise BlockTooTallError(
            f"weight block of {k_rows} rows exceeds array height {cfg.array_h}"
        )
    return k_rows


def vector_latency(elements: int, kind: str, cfg: CoreConfig,
                   op_latency_table: dict[str, int]) -> int:
    """Pipelined vector unit: startup latency plus one result batch per cycle.

    LAYERNORM and SOFTMAX make three passes over the operand (statistics,
    normalize, scale), so they cost three times the single-pass figure.
    """
    if kind not in op_latency_table:
        raise MissingLatencyError(f"no op latency configured for vector kind '{kind}'")
    batches = -(-elements // cfg.vector_width)
    base = op_latency_table[kind] + batches - 1
    if kind in ("SOFTMAX", "LAYERNORM"):
        return 3 * base
    return base


def dma_split(instr: Instruction, cfg: SimConfig, id_start: int = 0,
              core_id: int = 0, tile_id: int = 0, instr_index: int = 0,
              node_id: str = "", request_id: str = "",
              now: int = 0) -> list[MemoryRequest]:
    """Split an MVIN/MVOUT into aligned DRAM-granularity requests.

    The requests cover [dram_addr, dram_addr+bytes) at access-granularity
    alignment; a zero-size transfer is a no-op.
    """
    nbytes = instr.num_bytes
    if nbytes == 0:
        return []
    g = cfg.dram.access_bytes
    addr = instr.dram_addr
    first = addr // g
    last = (addr + nbytes - 1) // g
    is_write = instr.opcode == "MVOUT"
    return [
        MemoryRequest(
            id=id_start + i, addr=(first + i) * g, is_write=is_write,
            core_id=core_id, tile_id=tile_id, instr_index=instr_index,
            node_id=node_id, request_id=request_id, issued_cycle=now,
        )
        for i in range(last - first + 1)
    ]


class _ActiveTile:
    __slots__ = ("tp", "partition", "status", "dep_count", "dependents",
                 "ready", "n_issued", "n_done", "dma_outstanding", "port_end",
                 "array_remaining", "compute_pending", "gate_open", "accept_order")

    def __init__(self, tp: TileProgram, partition: int, accept_order: int):
        self.tp = tp
        self.partition = partition
        self.accept_order = accept_order
        n = len(tp.instrs)
        self.status = [0] * n  # 0 waiting, 1 issued, 2 done
        self.dep_count = [len(ins.deps) for ins in tp.instrs]
        self.dependents: list[list[int]] = [[] for _ in range(n)]
        for i, ins in enumerate(tp.instrs):
            for d in ins.deps:
                self.dependents[d].append(i)
        self.ready = {"systolic": deque(), "vector": deque(), "dma": deque()}
        for i, ins in enumerate(tp.instrs):
            if self.dep_count[i] == 0:
                self.ready[ins.unit].append(i)
        self.n_issued = 0
        self.n_done = 0
        self.dma_outstanding: dict[int, int] = {}
        self.port_end: dict[int, int] = {}
        self.array_remaining = sum(1 for ins in tp.instrs
                                   if ins.unit == "systolic")
        self.compute_pending = sum(1 for ins in tp.instrs
                                   if ins.opcode in COMPUTE_OPCODES)
        self.gate_open = tp.chain_pred is None


class Core:
    """One NPU core; advanced by the engine once per core cycle."""

    def __init__(self, core_id: int, cfg: SimConfig):
        self.core_id = core_id
        self.cfg = cfg
        self.slots: list[_ActiveTile] = []      # accepted, not yet all-issued
        self.draining: dict[int, _ActiveTile] = {}  # all-issued, not complete
        self.partition_bound = [False, False]
        self.next_partition = 0
        self.accept_counter = 0
        self.unit_free = {"systolic": 0, "vector": 0, "dma": 0}
        self.spm_read_free = 0
        self.spm_write_free = 0
        self.preloaded: tuple[int, int] | None = None
        self.retire_heap: list[tuple[int, int, int, int]] = []  # (t, seq, tile, idx)
        self._seq = 0
        self.chain_done: set[int] = set()
        self.by_id: dict[int, _ActiveTile] = {}
        # statistics
        self.busy_cycles = {"systolic": 0, "vector": 0, "dma": 0}
        self.busy_union = 0
        self._cov_until = 0
        self.node_busy: dict[tuple[str, str, str], int] = {}
        self.track_node_stats = False
        self.timeline: dict[int, int] = {}  # window index -> union busy cycles
        self.timeline_window = cfg.timeline_window
        self.trace: list[tuple[int, int, int, int, str, str]] | None = None

    # -- tile admission -----------------------------------------------------

    def can_accept_tile(self, tp: TileProgram) -> bool:
        if len(self.slots) >= 2:
            return False
        if self.partition_bound[self.next_partition]:
            return False
        core = self.cfg.core
        if tp.spm_bytes > core.spm_partition_bytes or tp.acc_bytes > core.acc_partition_bytes:
            return False
        if tp.chain_pred is not None and tp.chain_pred not in self.by_id \
                and tp.chain_pred not in self.chain_done:
            return False  # chain predecessor must have run here first
        return True

    def accept_tile(self, tp: TileProgram, now: int) -> None:
        if not self.can_accept_tile(tp):
            raise ConsistencyFault(
                f"core {self.core_id} cannot accept tile {tp.id} at cycle {now}"
            )
        core = self.cfg.core
        if tp.spm_bytes > core.spm_partition_bytes or tp.acc_bytes > core.acc_partition_bytes:
            raise FootprintError(f"tile {tp.id} exceeds a partition")
        at = _ActiveTile(tp, self.next_partition, self.accept_counter)
        self.accept_counter += 1
        self.partition_bound[self.next_partition] = True
        self.next_partition ^= 1
        self.slots.append(at)
        self.by_id[tp.id] = at

    # -- per-cycle advancement ----------------------------------------------

    def step(self, now: int, arrivals: list[tuple[str, int, int]],
              request_sink: list[MemoryRequest], next_req_id: list[int],
              completed: list[tuple[int, TileProgram]]) -> None:
        """One core cycle: apply arrivals, retire, then try_issue."""
        for kind, tile_id, idx in arrivals:
            at = self.by_id.get(tile_id)
            if at is None:
                raise ConsistencyFault(
                    f"core {self.core_id}: arrival for retired tile {tile_id}"
                )
            left = at.dma_outstanding.get(idx, 0) - 1
            if left < 0:
                raise ConsistencyFault(
                    f"core {self.core_id}: duplicate arrival tile {tile_id} instr {idx}"
                )
            at.dma_outstanding[idx] = left
            if left == 0:
                done_at = max(now, at.port_end.get(idx, now))
                if done_at <= now:
                    self._mark_done(at, idx, now, completed)
                else:
                    self._seq += 1
                    heapq.heappush(self.retire_heap, (done_at, self._seq, tile_id, idx))

        while self.retire_heap and self.retire_heap[0][0] <= now:
            _, _, tile_id, idx = heapq.heappop(self.retire_heap)
            at = self.by_id.get(tile_id)
            if at is None:
                raise ConsistencyFault(f"retire for unknown tile {tile_id}")
            self._mark_done(at, idx, now, completed)

        self.try_issue(now, request_sink, next_req_id, completed)

    def try_issue(self, now: int, request_sink: list[MemoryRequest],
                  next_req_id: list[int],
                  completed: list[tuple[int, TileProgram]]) -> list[tuple[int, int]]:
        """Issue every hazard-free instruction whose unit is available."""
        issued: list[tuple[int, int]] = []
        # Compute units first: compute wins scratchpad-port ties with DMA.
        for unit in ("systolic", "vector", "dma"):
            if self.unit_free[unit] > now:
                continue
            at, idx = self._candidate(unit, now)
            if at is None:
                continue
            self._issue_one(at, idx, now, request_sink, next_req_id, completed)
            issued.append((at.tp.id, idx))
        # Free slots for tiles that have issued everything.
        if self.slots:
            still = []
            for at in self.slots:
                if at.n_issued < len(at.tp.instrs):
                    still.append(at)
                elif at.n_done < len(at.tp.instrs):
                    self.draining[at.tp.id] = at
            if len(still) != len(self.slots):
                self.slots = still
        return issued

    def _candidate(self, unit: str, now: int):
        if unit == "systolic":
            # The array serves tiles strictly in age order to keep the
            # preloaded-weight register unambiguous.
            for at in self.slots:
                if at.array_remaining > 0:
                    q = at.ready[unit]
                    if q and self._issuable(at, q[0], now):
                        return at, q[0]
                    return None, None
            return None, None
        for at in self.slots:
            q = at.ready[unit]
            if q:
                if self._issuable(at, q[0], now):
                    return at, q[0]
                return None, None
        return None, None

    def _issuable(self, at: _ActiveTile, idx: int, now: int) -> bool:
        ins = at.tp.instrs[idx]
        op = ins.opcode
        if op in COMPUTE_OPCODES and not at.gate_open:
            if at.tp.chain_pred in self.chain_done:
                at.gate_open = True
                self.chain_done.discard(at.tp.chain_pred)
            else:
                return False
        if op == "GEMM":
            if self.preloaded != (at.tp.id, ins.weight_tag):
                return False  # weight register holds a different block
        needs_read, needs_write = self._ports_needed(ins)
        if needs_read and self.spm_read_free > now:
            return False
        if needs_write and self.spm_write_free > now:
            return False
        return True

    @staticmethod
    def _ports_needed(ins: Instruction) -> tuple[bool, bool]:
        op = ins.opcode
        if op == "MVIN":
            return False, True
        if op == "MVOUT":
            return (ins.space == "spm"), False
        if op == "IM2COL":
            return True, True
        if op == "VECTOR":
            spm = ins.space == "spm"
            return spm, spm
        if op in ("GEMM_PRELOAD", "GEMM"):
            return True, False
        return False, False

    def _issue_one(self, at: _ActiveTile, idx: int, now: int,
                   request_sink: list[MemoryRequest], next_req_id: list[int],
                   completed: list[tuple[int, TileProgram]]) -> None:
        ins = at.tp.instrs[idx]
        op = ins.opcode
        core = self.cfg.core
        at.ready[ins.unit].popleft()
        at.status[idx] = 1
        at.n_issued += 1
        if self.trace is not None:
            self.trace.append((now, self.core_id, at.tp.id, idx, op, "issue"))

        if op == "GEMM_PRELOAD":
            dur = preload_latency(ins.rows, core)
            self.preloaded = (at.tp.id, idx)
            self._occupy("systolic", at, ins, now, dur, read=True)
            self._schedule_retire(at, idx, now + dur)
        elif op == "GEMM":
            dur = systolic_compute_latency(ins.rows, core)
            self._occupy("systolic", at, ins, now, dur, read=True)
            self._schedule_retire(at, idx, now + dur)
        elif op == "VECTOR":
            dur = vector_latency(ins.cols * ins.rows, ins.vector_kind, core,
                                 self.cfg.op_latency)
            spm = ins.space == "spm"
            self._occupy("vector", at, ins, now, dur, read=spm, write=spm)
            self._schedule_retire(at, idx, now + dur)
        elif op == "IM2COL":
            per_row = -(-ins.cols * ins.elem_bytes // core.spm_word_bytes)
            dur = max(1, ins.rows * per_row)
            self._occupy("dma", at, ins, now, dur, read=True, write=True)
            self._schedule_retire(at, idx, now + dur)
        elif op in ("MVIN", "MVOUT"):
            reqs = dma_split(
                ins, self.cfg, id_start=next_req_id[0], core_id=self.core_id,
                tile_id=at.tp.id, instr_index=idx,
                node_id=at.tp.owner_node, request_id=at.tp.request_id or "",
                now=now)
            next_req_id[0] += len(reqs)
            dur = -(-ins.num_bytes // core.spm_word_bytes)
            needs_read, needs_write = self._ports_needed(ins)
            self._occupy("dma", at, ins, now, dur, read=needs_read, write=needs_write)
            if not reqs:
                self._mark_done(at, idx, now, completed)
            else:
                at.dma_outstanding[idx] = len(reqs)
                at.port_end[idx] = now + dur
                request_sink.extend(reqs)
        else:
            raise ConsistencyFault(f"unknown opcode {op}")

    def _occupy(self, unit: str, at: _ActiveTile, ins: Instruction, now: int,
                dur: int, read: bool = False, write: bool = False) -> None:
        end = now + dur
        self.unit_free[unit] = end
        if read:
            self.spm_read_free = end
        if write:
            self.spm_write_free = end
        if ins.unit == "systolic":
            at.array_remaining -= 1
        self.busy_cycles[unit] += dur
        if end > self._cov_until:
            add = end - max(now, self._cov_until)
            self.busy_union += add
            self._add_timeline(max(now, self._cov_until), end)
            self._cov_until = end
        if self.track_node_stats:
            key = (at.tp.request_id or "", at.tp.owner_node, unit)
            self.node_busy[key] = self.node_busy.get(key, 0) + dur

    def _add_timeline(self, start: int, end: int) -> None:
        w = self.timeline_window
        b = start // w
        while start < end:
            bound = min(end, (b + 1) * w)
            self.timeline[b] = self.timeline.get(b, 0) + (bound - start)
            start = bound
            b += 1

    def _schedule_retire(self, at: _ActiveTile, idx: int, when: int) -> None:
        self._seq += 1
        heapq.heappush(self.retire_heap, (when, self._seq, at.tp.id, idx))

    def _mark_done(self, at: _ActiveTile, idx: int, now: int,
                   completed: list[tuple[int, TileProgram]]) -> None:
        if at.status[idx] == 2:
            raise ConsistencyFault(
                f"instruction {idx} of tile {at.tp.id} completed twice"
            )
        at.status[idx] = 2
        at.n_done += 1
        ins = at.tp.instrs[idx]
        if self.trace is not None:
            self.trace.append((now, self.core_id, at.tp.id, idx, ins.opcode, "retire"))
        if ins.opcode in COMPUTE_OPCODES:
            at.compute_pending -= 1
            if at.compute_pending == 0:
                self.chain_done.add(at.tp.id)
        for d in at.dependents[idx]:
            at.dep_count[d] -= 1
            if at.dep_count[d] == 0:
                at.ready[at.tp.instrs[d].unit].append(d)
        if at.n_done == len(at.tp.instrs):
            self.partition_bound[at.partition] = False
            del self.by_id[at.tp.id]
            self.draining.pop(at.tp.id, None)
            if at in self.slots:
                self.slots.remove(at)
            completed.append((now, at.tp))
        elif at.n_issued == len(at.tp.instrs):
            self.draining[at.tp.id] = at

    # -- engine hooks ---------------------------------------------------------

    def busy(self) -> bool:
        return bool(self.slots or self.draining or self.retire_heap)

    def next_event(self, now: int) -> int | None:
        best = self.retire_heap[0][0] if self.retire_heap else None
        for unit in ("systolic", "vector", "dma"):
            at, idx = self._peek(unit)
            if at is None:
                continue
            t = max(now + 1, self.unit_free[unit])
            ins = at.tp.instrs[idx]
            needs_read, needs_write = self._ports_needed(ins)
            if needs_read:
                t = max(t, self.spm_read_free)
            if needs_write:
                t = max(t, self.spm_write_free)
            best = t if best is None else min(best, t)
        return best

    def _peek(self, unit: str):
        if unit == "systolic":
            for at in self.slots:
                if at.array_remaining > 0:
                    q = at.ready[unit]
                    return (at, q[0]) if q else (None, None)
            return None, None
        for at in self.slots:
            q = at.ready[unit]
            if q:
                return at, q[0]
        return None, None
