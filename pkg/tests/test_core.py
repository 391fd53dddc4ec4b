import pytest
from hypothesis import given, strategies as st

from npusim.config import SimConfig, load_preset
from npusim.core import (
    Core,
    dma_split,
    preload_latency,
    systolic_compute_latency,
    vector_latency,
)
from npusim.errors import (
    BlockTooTallError,
    ConsistencyFault,
    MissingLatencyError,
)
from npusim.lowering import Instruction, TileProgram


@pytest.fixture()
def mobile():
    return load_preset("mobile")


@pytest.fixture()
def server():
    return load_preset("server")


class TestLatencies:
    def test_systolic_8x8(self, mobile):
        assert systolic_compute_latency(8, mobile.core) == 23

    def test_systolic_128x128(self, server):
        assert systolic_compute_latency(128, server.core) == 383

    def test_systolic_gemv_edge(self, mobile):
        assert systolic_compute_latency(1, mobile.core) == 16

    def test_preload(self, mobile):
        assert preload_latency(8, mobile.core) == 8
        assert preload_latency(1, mobile.core) == 1
        with pytest.raises(BlockTooTallError):
            preload_latency(9, mobile.core)

    def test_vector_add_full_batch(self, mobile):
        assert vector_latency(128, "ADD", mobile.core, {"ADD": 1}) == 1

    def test_vector_gelu_pipelined(self, mobile):
        assert vector_latency(1024, "GELU", mobile.core, {"GELU": 4}) == 11

    def test_vector_three_pass_ops(self, mobile):
        base = vector_latency(256, "ADD", mobile.core, {"ADD": 2})
        tri = vector_latency(256, "SOFTMAX", mobile.core, {"SOFTMAX": 2})
        assert tri == 3 * base

    def test_vector_missing_kind(self, mobile):
        with pytest.raises(MissingLatencyError):
            vector_latency(8, "ADD", mobile.core, {})


class TestDmaSplit:
    def mvin(self, addr, nbytes):
        return Instruction("MVIN", 1, nbytes, 1, dram_addr=addr)

    def test_aligned(self, mobile):
        reqs = dma_split(self.mvin(0, 256), mobile)
        assert [r.addr for r in reqs] == [0, 64, 128, 192]
        assert all(not r.is_write for r in reqs)

    def test_unaligned_cover(self, mobile):
        reqs = dma_split(self.mvin(32, 100), mobile)
        assert [r.addr for r in reqs] == [0, 64, 128]

    def test_zero_bytes(self, mobile):
        assert dma_split(self.mvin(0, 0), mobile) == []

    def test_mvout_is_write(self, mobile):
        ins = Instruction("MVOUT", 1, 64, 1, dram_addr=0)
        assert all(r.is_write for r in dma_split(ins, mobile))

    @given(addr=st.integers(0, 1 << 20), nbytes=st.integers(1, 4096))
    def test_cover_count_oracle(self, addr, nbytes):
        cfg = SimConfig()
        g = cfg.dram.access_bytes
        reqs = dma_split(Instruction("MVIN", 1, nbytes, 1, dram_addr=addr), cfg)
        want = -(-(addr % g + nbytes) // g)
        assert len(reqs) == want
        assert reqs[0].addr <= addr
        assert reqs[-1].addr + g >= addr + nbytes
        assert all(r.addr % g == 0 for r in reqs)


def compute_tile(tid, blocks, m_rows, k_rows, with_mvout=False):
    """A tile with operands pre-resident: PRELOAD+GEMM pairs only."""
    instrs = []
    prev = None
    for _ in range(blocks):
        deps = [] if prev is None else [prev]
        p = len(instrs)
        instrs.append(Instruction("GEMM_PRELOAD", k_rows, 8, 0, deps=deps))
        instrs.append(Instruction(
            "GEMM", m_rows, 8, 0, space="acc", deps=[p], weight_tag=p))
        prev = p + 1
    if with_mvout:
        instrs.append(Instruction("MVOUT", 1, 64, 1, dram_addr=0, space="acc",
                                  deps=[prev]))
    return TileProgram(id=tid, owner_node="n", instrs=instrs,
                       spm_bytes=0, acc_bytes=256)


def drive(core, tiles, arrivals=None, max_cycles=100000):
    """Run a core to completion, feeding scheduled arrival events."""
    arrivals = arrivals or {}
    completed = []
    requests = []
    counter = [0]
    for tp in tiles:
        core.accept_tile(tp, 0)
    t = 0
    while core.busy() or any(c > t for c in arrivals):
        due = arrivals.get(t, [])
        core.step(t, due, requests, counter, completed)
        t += 1
        if t > max_cycles:
            raise AssertionError("core did not drain")
    return completed, requests, t


class TestCoreTiming:
    def test_single_block_exact(self, mobile):
        core = Core(0, mobile)
        core.trace = []
        tp = compute_tile(0, 1, 8, 8)
        completed, _, _ = drive(core, [tp])
        assert len(completed) == 1
        done_at = completed[0][0]
        assert done_at == preload_latency(8, mobile.core) + \
            systolic_compute_latency(8, mobile.core)

    @pytest.mark.parametrize("blocks", [1, 2, 4, 7])
    def test_back_to_back_blocks(self, mobile, blocks):
        core = Core(0, mobile)
        tp = compute_tile(0, blocks, 8, 8)
        completed, _, _ = drive(core, [tp])
        assert completed[0][0] == blocks * (8 + 23)

    def test_replay_determinism(self, mobile):
        def run():
            core = Core(0, mobile)
            core.trace = []
            drive(core, [compute_tile(0, 3, 8, 8, with_mvout=False)])
            return list(core.trace)
        assert run() == run()


class TestHazards:
    def test_preload_issues_when_deps_done(self, mobile):
        core = Core(0, mobile)
        core.trace = []
        drive(core, [compute_tile(0, 1, 8, 8)])
        first = core.trace[0]
        assert first[4] == "GEMM_PRELOAD" and first[0] == 0

    def test_gemm_waits_for_matching_preload(self, mobile):
        # A GEMM whose weight tag is not the preloaded one must not issue.
        core = Core(0, mobile)
        tp = compute_tile(0, 1, 8, 8)
        core.accept_tile(tp, 0)
        at = core.slots[0]
        core.preloaded = (99, 0)  # poison the weight register
        at.dep_count[1] = 0       # pretend the dep is done
        at.ready["systolic"].append(1)
        sink, counter, completed = [], [0], []
        issued = core.try_issue(0, sink, counter, completed)
        # The PRELOAD (index 0, queue head) issues; the GEMM cannot this cycle.
        assert (0, 1) not in issued

    def test_vector_unit_age_order(self, mobile):
        # Two active tiles both wanting the vector unit: older tile first.
        def vec_tile(tid):
            return TileProgram(
                id=tid, owner_node=f"n{tid}",
                instrs=[Instruction("VECTOR", 1, 128, 4, vector_kind="ADD",
                                    space="acc")],
                spm_bytes=0, acc_bytes=512)
        core = Core(0, mobile)
        core.trace = []
        t_old, t_new = vec_tile(0), vec_tile(1)
        core.accept_tile(t_old, 0)
        core.accept_tile(t_new, 0)
        sink, counter, completed = [], [0], []
        core.step(0, [], sink, counter, completed)
        issues = [(ev[2], ev[0]) for ev in core.trace if ev[5] == "issue"]
        assert issues[0] == (0, 0)  # older tile id 0 at cycle 0
        assert all(tid != 1 or cyc > 0 for tid, cyc in issues)

    def test_arrival_for_retired_tile_faults(self, mobile):
        core = Core(0, mobile)
        drive(core, [compute_tile(0, 1, 8, 8)])
        with pytest.raises(ConsistencyFault):
            core.step(100, [("data", 0, 0)], [], [0], [])


class TestTileAdmission:
    def test_idle_core_accepts(self, mobile):
        core = Core(0, mobile)
        assert core.can_accept_tile(compute_tile(0, 1, 8, 8))

    def test_two_active_rejects(self, mobile):
        core = Core(0, mobile)
        core.accept_tile(compute_tile(0, 4, 8, 8), 0)
        core.accept_tile(compute_tile(1, 4, 8, 8), 0)
        assert not core.can_accept_tile(compute_tile(2, 1, 8, 8))

    def test_slot_frees_at_last_issue_not_completion(self, mobile):
        # Tile 0: single MVOUT; once issued (write in flight), the slot is
        # free and partition 1 is available for the next tile.
        core = Core(0, mobile)
        mvout_tile = TileProgram(
            id=0, owner_node="n",
            instrs=[Instruction("MVOUT", 1, 64, 1, dram_addr=0, space="acc")],
            spm_bytes=0, acc_bytes=64)
        core.accept_tile(mvout_tile, 0)
        sink, counter, completed = [], [0], []
        core.step(0, [], sink, counter, completed)   # issues the MVOUT
        assert not completed                         # ack still pending
        assert core.can_accept_tile(compute_tile(1, 1, 8, 8))
        core.accept_tile(compute_tile(1, 1, 8, 8), 1)
        # Partition 0 still bound until the MVOUT's write is accepted.
        assert not core.can_accept_tile(compute_tile(2, 1, 8, 8))
        core.step(5, [("ack", 0, 0)], sink, counter, completed)
        assert any(tp.id == 0 for _, tp in completed)
        assert core.can_accept_tile(compute_tile(2, 1, 8, 8))

    def test_oversized_tile_rejected(self, mobile):
        core = Core(0, mobile)
        huge = TileProgram(
            id=0, owner_node="n",
            instrs=[Instruction("VECTOR", 1, 8, 4, vector_kind="ADD")],
            spm_bytes=mobile.core.spm_partition_bytes + 1, acc_bytes=0)
        assert not core.can_accept_tile(huge)


class TestDoubleBuffering:
    def test_second_tile_loads_during_first_compute(self, mobile):
        # Tile 0 computes from resident operands; tile 1 has an MVIN whose
        # data arrives quickly.  The MVIN must issue while tile 0 computes.
        core = Core(0, mobile)
        core.trace = []
        t0 = compute_tile(0, 8, 8, 8)  # 8*(8+23) = 248 cycles of compute
        t1 = TileProgram(
            id=1, owner_node="n1",
            instrs=[
                Instruction("MVIN", 8, 8, 1, dram_addr=0),
                Instruction("GEMM_PRELOAD", 8, 8, 0, deps=[0]),
                Instruction("GEMM", 8, 8, 0, space="acc", deps=[1], weight_tag=1),
            ],
            spm_bytes=64, acc_bytes=256)
        core.accept_tile(t0, 0)
        core.accept_tile(t1, 0)
        arrivals = {10: [("data", 1, 0)]}
        completed, requests, _ = drive(core, [], arrivals=arrivals)
        assert len(requests) == 1  # tile 1's MVIN went out
        mvin_issue = next(ev for ev in core.trace
                          if ev[2] == 1 and ev[4] == "MVIN" and ev[5] == "issue")
        t0_done = next(ev for ev in core.trace
                       if ev[2] == 0 and ev[5] == "retire" and ev[3] == 15)
        assert mvin_issue[0] < t0_done[0]
        # Tile 1's array work starts only after tile 0 releases the array.
        t1_preload = next(ev for ev in core.trace
                          if ev[2] == 1 and ev[4] == "GEMM_PRELOAD")
        assert t1_preload[0] >= t0_done[0]
