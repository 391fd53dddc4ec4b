import pytest

from npusim.config import DramConfig, NocConfig
from npusim.dram import DramSystem, MemoryRequest
from npusim.noc import CrossbarNoc, SimpleNoc, _Crossbar


def req(rid, addr=0, core=0, write=False):
    return MemoryRequest(id=rid, addr=addr, is_write=write, core_id=core,
                         tile_id=0, instr_index=0)


def one_channel_dram(depth=64):
    return DramSystem(DramConfig(channels=1, queue_depth=depth))


class TestSimpleModel:
    def cfg(self, latency=8, bpc=8, header=8):
        return NocConfig(model="simple", latency_cycles=latency,
                         bytes_per_cycle=bpc, header_bytes=header)

    def test_read_command_delivers_after_latency(self):
        noc = SimpleNoc(self.cfg(), num_cores=1, access_bytes=64)
        dram = one_channel_dram()
        noc.push_request(req(0), now=0)
        for t in range(8):
            assert not noc.step_forward(t, dram, t)
        assert noc.step_forward(8, dram, 8)

    def test_write_serialization_matches_stated_rule(self):
        # Two 64 B write payloads in the same cycle at 8 B/cycle: the second
        # delivers exactly 64/8 = 8 cycles after the first (header disabled
        # to mirror the payload-only arithmetic).
        noc = SimpleNoc(self.cfg(header=0), num_cores=1, access_bytes=64)
        dram = one_channel_dram()
        noc.push_request(req(0, write=True), now=0)
        noc.push_request(req(1, addr=64, write=True), now=0)
        deliveries = {}
        for t in range(40):
            for r in noc.step_forward(t, dram, t):
                deliveries[r.id] = t
        assert deliveries[1] - deliveries[0] == 8

    def test_idle_link_does_not_advance(self):
        noc = SimpleNoc(self.cfg(), num_cores=2, access_bytes=64)
        assert noc.fwd_free == [0, 0]
        noc.push_request(req(0, core=1), now=5)
        assert noc.fwd_free[0] == 0

    def test_backpressure_retries_fifo(self):
        noc = SimpleNoc(self.cfg(latency=1), num_cores=1, access_bytes=64)
        dram = one_channel_dram(depth=1)
        for i in range(3):
            noc.push_request(req(i, addr=i * 64), now=0)
        accepted = []
        t = 0
        while noc.busy():
            accepted += [r.id for r in noc.step_forward(t, dram, t)]
            dram.tick(t)
            t += 1
            assert t < 1000
        assert accepted == [0, 1, 2]

    def test_throughput_bound(self):
        # Delivered bytes per link never exceed bytes_per_cycle x window.
        noc = SimpleNoc(self.cfg(latency=1, bpc=8, header=8), num_cores=1,
                        access_bytes=64)
        dram = one_channel_dram(depth=1024)
        for i in range(50):
            noc.push_request(req(i, addr=i * 64, write=True), now=0)
        done_at = {}
        t = 0
        while noc.busy():
            for r in noc.step_forward(t, dram, t):
                done_at[r.id] = t
            t += 1
        window = max(done_at.values())
        assert 50 * 72 <= 8 * window + 72  # serialization at 9 cycles each


class TestCrossbar:
    def cfg(self):
        return NocConfig(model="crossbar", flit_bytes=8, header_bytes=8)

    def test_nine_flit_write_takes_nine_cycles(self):
        dram = one_channel_dram()
        noc = CrossbarNoc(self.cfg(), num_cores=1, num_channels=1,
                          access_bytes=64, channel_of=dram.channel_of)
        noc.push_request(req(0, write=True), now=0)
        delivered_at = None
        for t in range(20):
            if noc.step_forward(t, dram, t):
                delivered_at = t
                break
        assert delivered_at == 8  # flits move at cycles 0..8 inclusive

    def test_round_robin_alternates(self):
        xb = _Crossbar(2, 1)
        a, b = req(0), req(1)
        xb.inject(0, 0, 4, a)
        xb.inject(1, 0, 4, b)
        grants = []
        for _ in range(8):
            for _, r in xb.step(set()):
                grants.append(r.id)
        # Equal-length requests interleave; both complete around 2x alone.
        assert grants == [0, 1] or grants == [1, 0]
        assert xb.flits_moved == 8

    def test_fairness_window(self):
        xb = _Crossbar(2, 1)
        for i in range(64):
            xb.inject(0, 0, 1, req(100 + i))
            xb.inject(1, 0, 1, req(200 + i))
        counts = {0: 0, 1: 0}
        for _ in range(64):
            for _, r in xb.step(set()):
                counts[0 if r.id < 200 else 1] += 1
        assert abs(counts[0] - counts[1]) <= 1

    def test_blocked_output_retries(self):
        dram = one_channel_dram(depth=1)
        noc = CrossbarNoc(self.cfg(), num_cores=1, num_channels=1,
                          access_bytes=64, channel_of=dram.channel_of)
        noc.push_request(req(0), now=0)
        noc.push_request(req(1, addr=64), now=0)
        accepted = []
        t = 0
        while noc.busy():
            accepted += [(r.id, t) for r in noc.step_forward(t, dram, t)]
            dram.tick(t)
            t += 1
            assert t < 1000
        assert [rid for rid, _ in accepted] == [0, 1]
        # Request 1 was held back until the controller freed its queue slot.
        assert accepted[1][1] - accepted[0][1] > 1

    def test_work_conservation(self):
        # An output with an eligible head flit grants exactly one per cycle.
        xb = _Crossbar(3, 2)
        xb.inject(0, 0, 5, req(0))
        xb.inject(1, 0, 5, req(1))
        xb.inject(2, 1, 5, req(2))
        for _ in range(5):
            before = xb.flits_moved
            xb.step(set())
            assert xb.flits_moved - before == 2  # both outputs busy
        for _ in range(5):  # output 0 keeps granting until both drain
            before = xb.flits_moved
            xb.step(set())
            assert xb.flits_moved - before == 1
        assert xb.inflight == 0

    def test_per_source_fifo_order(self):
        dram = one_channel_dram()
        noc = CrossbarNoc(self.cfg(), num_cores=2, num_channels=1,
                          access_bytes=64, channel_of=dram.channel_of)
        for i in range(4):
            noc.push_request(req(i, addr=i * 64, core=0), now=0)
        order = []
        t = 0
        while noc.busy():
            order += [r.id for r in noc.step_forward(t, dram, t)]
            t += 1
        assert order == [0, 1, 2, 3]

    def test_return_path_delivers_next_cycle_or_later(self):
        dram = one_channel_dram()
        noc = CrossbarNoc(self.cfg(), num_cores=1, num_channels=1,
                          access_bytes=64, channel_of=dram.channel_of)
        noc.push_response(req(0), now=10)
        seen = []
        for t in range(10, 30):
            seen += noc.step_return(t)
        assert seen
        cycle, r = seen[0]
        assert cycle > 10 + 8 - 1  # nine flits then next-cycle arrival
