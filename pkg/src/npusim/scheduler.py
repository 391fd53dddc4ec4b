"""Global scheduler: request lifecycle, ready tile queues, dispatch policies.

Nodes are lowered lazily, when their producer nodes finish, so generative
requests can rebind the KV length each step before lowering the
shape-dependent attention nodes.  K-accumulation chains carry an affinity
hint pinning them to the core that ran the chain head.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

from .config import SimConfig
from .errors import ConfigError, ConsistencyFault, WorkloadError
from .graph import ModelGraph, bind_shapes, fuse_operators, topological_order
from .lowering import AddressMap, TileProgram, lower_node


@dataclass
class InferenceRequest:
    request_id: str
    model: ModelGraph
    batch: int = 1
    arrival: int = 0
    kind: str = "static"  # static | generative
    prompt_len: int = 0
    gen_tokens: int = 0
    background: bool = False
    bindings: dict[str, int] = field(default_factory=dict)

    def validate(self) -> None:
        if self.batch < 1:
            raise WorkloadError(f"request '{self.request_id}': batch must be >= 1")
        if self.kind not in ("static", "generative"):
            raise WorkloadError(f"request '{self.request_id}': unknown kind '{self.kind}'")
        if self.kind == "generative" and (self.prompt_len < 1 or self.gen_tokens < 1):
            raise WorkloadError(
                f"request '{self.request_id}': generative needs prompt_len >= 1 "
                f"and gen_tokens >= 1"
            )


class _RequestState:
    __slots__ = ("req", "index", "fused", "order", "succ", "preds_of",
                 "graph", "addrs", "step", "node_pending", "tiles_left",
                 "started_at", "completed_at", "token_times", "spawn",
                 "queue", "current_node_idx", "done_nodes")

    def __init__(self, req: InferenceRequest, index: int):
        self.req = req
        self.index = index
        self.fused = fuse_operators(req.model)
        self.order = topological_order(self.fused)
        producer = self.fused.producers()
        self.preds_of = {}
        self.succ = {nid: [] for nid in self.order}
        for node in self.fused.nodes:
            deps = {producer[t] for t in node.inputs if t in producer}
            deps.discard(node.id)
            self.preds_of[node.id] = deps
            for d in deps:
                self.succ[d].append(node.id)
        self.graph: ModelGraph | None = None
        self.addrs: AddressMap | None = None
        self.step = 0
        self.node_pending: dict[str, int] = {}
        self.tiles_left: dict[str, int] = {}
        self.done_nodes: set[str] = set()
        self.started_at = -1
        self.completed_at = -1
        self.token_times: list[int] = []
        self.spawn = 0
        self.queue: deque[TileProgram] = deque()
        self.current_node_idx = 0

    def step_bindings(self) -> dict[str, int]:
        req = self.req
        b = dict(req.bindings)
        symbols = self.fused.symbols()
        if "batch" in symbols and "batch" not in b:
            b["batch"] = req.batch
        if req.kind == "generative":
            b["kv_len"] = req.prompt_len + self.step
        return {k: v for k, v in b.items() if k in symbols}

    def current_node(self) -> str | None:
        """Earliest incomplete node in topo order (time-share granularity)."""
        while self.current_node_idx < len(self.order):
            nid = self.order[self.current_node_idx]
            if nid not in self.done_nodes:
                return nid
            self.current_node_idx += 1
        return None


class Scheduler:
    def __init__(self, cfg: SimConfig, requests: list[InferenceRequest]):
        self.cfg = cfg
        ids = [r.request_id for r in requests]
        if len(set(ids)) != len(ids):
            raise WorkloadError("duplicate request ids in workload")
        for r in requests:
            r.validate()
        if cfg.scheduler.policy == "spatial":
            missing = [r.request_id for r in requests
                       if r.request_id not in cfg.scheduler.partition]
            if missing:
                raise ConfigError(
                    f"spatial policy: no core partition for requests {missing}"
                )
        self.states = [_RequestState(r, i)
                       for i, r in enumerate(sorted(requests, key=lambda r: (r.arrival, r.request_id)))]
        self.pending_arrivals = deque(self.states)
        self.live: list[_RequestState] = []
        self.tile_counter = 0
        self.tile_owner: dict[int, _RequestState] = {}
        self.chain_core: dict[tuple, int] = {}
        self.active_rr = 0  # time-share round-robin cursor
        # conservation + stats
        self.tiles_created = 0
        self.tiles_dispatched = 0
        self.tiles_completed = 0
        self.tiles_cancelled = 0
        self.retired: list[_RequestState] = []
        self.node_spans: dict[tuple[str, str], list[list[int]]] = {}
        self.track_node_stats = False
        self._dispatched: set[int] = set()

    # -- request lifecycle ----------------------------------------------------

    def start_due_requests(self, now: int) -> None:
        while self.pending_arrivals and self.pending_arrivals[0].req.arrival <= now:
            st = self.pending_arrivals.popleft()
            self._start_request(st, now)

    def _start_request(self, st: _RequestState, now: int) -> None:
        st.started_at = now
        st.step = 0
        self.live.append(st)
        self._begin_step(st, now)

    def _begin_step(self, st: _RequestState, now: int) -> None:
        st.graph = bind_shapes(st.fused, st.step_bindings())
        base = self.cfg.dram_base + st.index * self.cfg.request_region_bytes
        st.addrs = AddressMap(base)
        st.addrs.assign_graph(st.graph)
        st.node_pending = {nid: len(st.preds_of[nid]) for nid in st.order}
        st.tiles_left = {}
        st.done_nodes = set()
        st.current_node_idx = 0
        for nid in st.order:
            if st.node_pending[nid] == 0:
                self._lower_node(st, nid, now)

    def _lower_node(self, st: _RequestState, nid: str, now: int) -> None:
        node = st.graph.node(nid)
        tiles = lower_node(node, st.graph, st.addrs, self.cfg,
                           self.tile_counter, st.req.request_id)
        self.tile_counter += len(tiles)
        self.tiles_created += len(tiles)
        st.tiles_left[nid] = len(tiles)
        for tp in tiles:
            if tp.chain_key is not None:
                tp.chain_key = (st.req.request_id, st.step, *tp.chain_key)
            self.tile_owner[tp.id] = st
            st.queue.append(tp)
        if self.track_node_stats:
            self.node_spans.setdefault((st.req.request_id, nid), []).append([now, -1])

    # -- completion path --------------------------------------------------------

    def on_tile_complete(self, tp: TileProgram, now: int) -> None:
        st = self.tile_owner.pop(tp.id, None)
        if st is None or tp.id not in self._dispatched:
            raise ConsistencyFault(f"completion for unknown or undispatched tile {tp.id}")
        self._dispatched.discard(tp.id)
        self.tiles_completed += 1
        left = st.tiles_left[tp.owner_node] - 1
        if left < 0:
            raise ConsistencyFault(f"tile {tp.id} completed twice")
        st.tiles_left[tp.owner_node] = left
        if left == 0:
            self._on_node_complete(st, tp.owner_node, now)

    def _on_node_complete(self, st: _RequestState, nid: str, now: int) -> None:
        was_current = (self.cfg.scheduler.policy == "time_share"
                       and self._active_state() is st and st.current_node() == nid)
        st.done_nodes.add(nid)
        if self.track_node_stats:
            self.node_spans[(st.req.request_id, nid)][-1][1] = now
        newly = []
        for succ in st.succ[nid]:
            st.node_pending[succ] -= 1
            if st.node_pending[succ] == 0:
                newly.append(succ)
        for succ in newly:
            self._lower_node(st, succ, now)
        if len(st.done_nodes) == len(st.order):
            self._on_step_complete(st, now)
        if was_current:
            self._advance_rr()

    def _on_step_complete(self, st: _RequestState, now: int) -> None:
        req = st.req
        if req.kind == "generative":
            st.token_times.append(now)
            st.step += 1
            if st.step < req.gen_tokens:
                self._begin_step(st, now)
                return
        self.live.remove(st)
        if req.background and not self.foreground_done():
            # Background co-runners respawn to sustain contention.
            st.spawn += 1
            st.step = 0
            self.live.append(st)
            self._begin_step(st, now)
            return
        st.completed_at = now
        self.retired.append(st)

    # -- policies and dispatch -------------------------------------------------

    def _active_state(self) -> _RequestState | None:
        if not self.live:
            return None
        return self.live[self.active_rr % len(self.live)]

    def _advance_rr(self) -> None:
        if self.live:
            self.active_rr = (self.active_rr + 1) % len(self.live)

    def _admissible_states(self, core_id: int) -> list[_RequestState]:
        policy = self.cfg.scheduler.policy
        if policy == "spatial":
            out = []
            for st in self.live:
                cores = self.cfg.scheduler.partition.get(st.req.request_id, [])
                if core_id in cores:
                    out.append(st)
            return out
        if policy == "time_share":
            st = self._active_state()
            return [st] if st is not None else []
        return list(self.live)

    def _find_admissible(self, st: _RequestState, core, freeze_background: bool):
        """Index and tile of the first dispatchable entry in st's queue."""
        if freeze_background and st.req.background:
            return None
        current = None
        if self.cfg.scheduler.policy == "time_share":
            current = st.current_node()
        for i, tp in enumerate(st.queue):
            if current is not None and tp.owner_node != current:
                continue
            if tp.chain_key is not None:
                bound = self.chain_core.get(tp.chain_key)
                if bound is not None and bound != core.core_id:
                    continue
            if not core.can_accept_tile(tp):
                continue
            return i, tp
        return None

    def dispatch(self, cores, now: int) -> list[tuple[int, TileProgram]]:
        """Assign at most one queued tile to each accepting core (id order)."""
        assigned: list[tuple[int, TileProgram]] = []
        freeze = self.foreground_done()
        for core in cores:
            if len(core.slots) >= 2:
                continue
            best = None  # (tile_id, state, queue index, tile)
            for st in self._admissible_states(core.core_id):
                found = self._find_admissible(st, core, freeze)
                if found is not None and (best is None or found[1].id < best[0]):
                    best = (found[1].id, st, found[0], found[1])
            if best is None:
                continue
            _, st, qi, tp = best
            del st.queue[qi]
            if tp.chain_key is not None:
                if tp.chain_key not in self.chain_core:
                    self.chain_core[tp.chain_key] = core.core_id
                if tp.chain_tail:
                    self.chain_core.pop(tp.chain_key, None)
            core.accept_tile(tp, now)
            self.tiles_dispatched += 1
            self._dispatched.add(tp.id)
            assigned.append((core.core_id, tp))
        return assigned

    # -- termination --------------------------------------------------------------

    def foreground_done(self) -> bool:
        return all(st.req.background for st in self.live) and not any(
            not st.req.background for st in self.pending_arrivals)

    def done(self) -> bool:
        if not self.foreground_done():
            return False
        if self._dispatched:
            return False
        # Undispatched background tiles are dropped once foregrounds retire.
        for st in self.live:
            self.tiles_cancelled += len(st.queue)
            st.queue.clear()
        return True

    def next_arrival(self) -> int | None:
        return self.pending_arrivals[0].req.arrival if self.pending_arrivals else None

    def has_queued(self) -> bool:
        return any(st.queue for st in self.live)
