"""Top-level simulation engine: the fixed-phase cycle loop.

Phase order within one core cycle is cores -> NoC -> DRAM -> NoC-return ->
scheduler; this single documented order defines simultaneity, so runs are
bit-reproducible.  When no component can change state before some future
cycle, the loop jumps there; reports are identical with the jump on or off
(that equivalence is itself a test).
"""

from __future__ import annotations

import heapq

from .config import SimConfig
from .core import Core
from .dram import DramSystem, MemoryRequest
from .errors import ConsistencyFault
from .noc import make_noc
from .scheduler import InferenceRequest, Scheduler


class Simulator:
    def __init__(self, cfg: SimConfig, requests: list[InferenceRequest],
                 trace: bool = False, track_node_stats: bool = False):
        cfg.validate()
        self.cfg = cfg
        self.cores = [Core(i, cfg) for i in range(cfg.num_cores)]
        self.dram = DramSystem(cfg.dram)
        self.noc = make_noc(cfg.noc, cfg.num_cores, cfg.dram.channels,
                            cfg.dram.access_bytes, self.dram.channel_of)
        self.scheduler = Scheduler(cfg, requests)
        self.now = 0
        self.last_dram_tick = -1
        self.next_req_id = [0]
        self.arrivals: list[list] = [[] for _ in range(cfg.num_cores)]  # heaps
        self._arr_seq = 0
        self.trace: list | None = [] if trace else None
        if trace:
            for core in self.cores:
                core.trace = self.trace
        if track_node_stats:
            self.scheduler.track_node_stats = True
            self.dram.track_node_bytes = True
            for core in self.cores:
                core.track_node_stats = True
        # aggregate statistics
        self.dram_timeline: dict[int, int] = {}  # window -> bytes
        self.reads_completed = 0
        self.writes_completed = 0

    # -- clock domain conversion ----------------------------------------------

    def _dram_tick_of(self, core_cycle: int) -> int:
        return core_cycle * self.cfg.dram.clock_hz // self.cfg.core.clock_hz

    # -- main loop ---------------------------------------------------------------

    def run(self, max_cycles: int | None = None) -> None:
        self.scheduler.start_due_requests(self.now)
        self.scheduler.dispatch(self.cores, self.now)
        while not self._all_done():
            if max_cycles is not None and self.now > max_cycles:
                raise ConsistencyFault(
                    f"simulation exceeded max_cycles={max_cycles}"
                )
            activity = self._cycle(self.now)
            if self._all_done():
                break
            self.now = self.now + 1 if (activity or not self.cfg.event_jump) \
                else self._next_event_cycle()

    def _cycle(self, now: int) -> bool:
        new_requests: list[MemoryRequest] = []
        completed_tiles: list[tuple[int, object]] = []

        # Phase 1: cores issue/retire.
        any_arrival = False
        for core in self.cores:
            heap = self.arrivals[core.core_id]
            due: list[tuple[str, int, int]] = []
            while heap and heap[0][0] <= now:
                _, _, kind, tile_id, idx = heapq.heappop(heap)
                due.append((kind, tile_id, idx))
            if due:
                any_arrival = True
            if due or core.busy():
                core.step(now, due, new_requests, self.next_req_id, completed_tiles)

        # Phase 2: forward NoC into the controllers.  DRAM ticks that belong
        # to skipped core cycles replay first so a request enqueued now is
        # never visible to a tick earlier than its arrival.
        dram_done: list[tuple[int, MemoryRequest]] = []
        tick_now = self._dram_tick_of(now)
        if self.dram.busy():
            for tick in range(self.last_dram_tick + 1, tick_now):
                dram_done.extend(self.dram.tick(tick))
        for req in new_requests:
            self.noc.push_request(req, now)
        accepted = self.noc.step_forward(now, self.dram, tick_now)
        for req in accepted:
            if req.is_write:
                self._push_arrival(req.core_id, now + 1, "ack",
                                   req.tile_id, req.instr_index)

        # Phase 3: this core cycle's own DRAM tick.
        if tick_now > self.last_dram_tick and self.dram.busy():
            dram_done.extend(self.dram.tick(tick_now))
        self.last_dram_tick = tick_now
        window = self.cfg.timeline_window
        for _, req in dram_done:
            req.completed_cycle = now
            b = self.dram_timeline
            key = now // window
            b[key] = b.get(key, 0) + self.cfg.dram.access_bytes
            if req.is_write:
                self.writes_completed += 1
            else:
                self.reads_completed += 1
                self.noc.push_response(req, now)

        # Phase 4: return NoC back to the cores.
        returns = self.noc.step_return(now)
        for cycle, req in returns:
            self._push_arrival(req.core_id, max(cycle, now + 1), "data",
                               req.tile_id, req.instr_index)

        # Phase 5: scheduler bookkeeping and dispatch.
        self.scheduler.start_due_requests(now)
        for _, tp in completed_tiles:
            self.scheduler.on_tile_complete(tp, now)
        dispatched = self.scheduler.dispatch(self.cores, now)

        return bool(new_requests or accepted or dram_done or returns
                    or completed_tiles or dispatched or any_arrival)

    def _push_arrival(self, core_id: int, cycle: int, kind: str,
                      tile_id: int, idx: int) -> None:
        self._arr_seq += 1
        heapq.heappush(self.arrivals[core_id],
                       (cycle, self._arr_seq, kind, tile_id, idx))

    def _all_done(self) -> bool:
        if not self.scheduler.done():
            return False
        if self.noc.busy() or self.dram.busy():
            return False
        if any(self.arrivals[c] for c in range(self.cfg.num_cores)):
            return False
        return not any(core.busy() for core in self.cores)

    def _next_event_cycle(self) -> int:
        now = self.now
        best: int | None = None

        def consider(t):
            nonlocal best
            if t is not None and (best is None or t < best):
                best = t

        for core in self.cores:
            consider(core.next_event(now))
        for heap in self.arrivals:
            if heap:
                consider(heap[0][0])
        consider(self.noc.next_event(now))
        tick = self.dram.next_event(self._dram_tick_of(now))
        if tick is not None:
            co, dr = self.cfg.core.clock_hz, self.cfg.dram.clock_hz
            consider(max(now + 1, -(-tick * co // dr)))
        consider(self.scheduler.next_arrival())
        if best is None:
            raise ConsistencyFault(
                f"deadlock: no future events at cycle {now} "
                f"(queued tiles: {sum(len(s.queue) for s in self.scheduler.live)})"
            )
        return max(best, now + 1)

    # -- derived statistics ------------------------------------------------------

    def total_cycles(self) -> int:
        return self.now

    def conservation(self) -> dict:
        sch = self.scheduler
        return {
            "tiles_created": sch.tiles_created,
            "tiles_dispatched": sch.tiles_dispatched,
            "tiles_completed": sch.tiles_completed,
            "tiles_cancelled": sch.tiles_cancelled,
            "mem_requests_enqueued": self.dram.enqueued,
            "mem_requests_completed": self.dram.completed,
        }

    def check_conservation(self) -> None:
        c = self.conservation()
        if c["tiles_dispatched"] != c["tiles_completed"]:
            raise ConsistencyFault(
                f"tile conservation violated: {c['tiles_dispatched']} dispatched "
                f"vs {c['tiles_completed']} completed"
            )
        if c["mem_requests_enqueued"] != c["mem_requests_completed"]:
            raise ConsistencyFault(
                f"memory request conservation violated: "
                f"{c['mem_requests_enqueued']} enqueued vs "
                f"{c['mem_requests_completed']} completed"
            )


def run_simulation(cfg: SimConfig, requests: list[InferenceRequest],
                   trace: bool = False, track_node_stats: bool = False,
                   max_cycles: int | None = None) -> Simulator:
    sim = Simulator(cfg, requests, trace=trace, track_node_stats=track_node_stats)
    sim.run(max_cycles=max_cycles)
    sim.check_conservation()
    return sim
