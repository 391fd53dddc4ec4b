"""Lowering of operator nodes to tile-level instruction programs.

Each (possibly fused) node becomes one or more TilePrograms over the core
ISA (MVIN/MVOUT, GEMM_PRELOAD/GEMM, IM2COL, VECTOR).  Tile shapes are
chosen to maximize scratchpad-partition utilization under double
buffering; K-split GEMM tiles form accumulation chains that stay on one
core so partial sums never leave the accumulator SRAM.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .config import SimConfig
from .errors import (
    AxisTooLargeError,
    DegenerateShapeError,
    FootprintError,
    UnsupportedAttributeError,
)
from .graph import DTYPE_BYTES, ModelGraph, OpNode, _conv_pads, _conv_strides

ACC_ELEM_BYTES = 4  # partial sums accumulate in fp32

OPCODES = ("MVIN", "MVOUT", "GEMM_PRELOAD", "GEMM", "IM2COL", "VECTOR")

VECTOR_KIND_OF_OP = {
    "Add": "ADD",
    "Mul": "MUL",
    "GELU": "GELU",
    "ReLU": "RELU",
    "Softmax": "SOFTMAX",
    "LayerNorm": "LAYERNORM",
}

UNIT_OF_OPCODE = {
    "MVIN": "dma",
    "MVOUT": "dma",
    "IM2COL": "dma",
    "GEMM_PRELOAD": "systolic",
    "GEMM": "systolic",
    "VECTOR": "vector",
}


@dataclass(slots=True)
class Instruction:
    opcode: str
    rows: int
    cols: int
    elem_bytes: int = 1
    vector_kind: str | None = None
    dram_addr: int | None = None
    spm_offset: int = 0
    space: str = "spm"  # spm | acc: on-chip side this instruction touches
    deps: list[int] = field(default_factory=list)
    weight_tag: int | None = None  # GEMM: index of the PRELOAD it consumes

    @property
    def num_bytes(self) -> int:
        return self.rows * self.cols * self.elem_bytes

    @property
    def unit(self) -> str:
        return UNIT_OF_OPCODE[self.opcode]

    def listing(self) -> str:
        parts = [self.opcode]
        if self.vector_kind:
            parts.append(self.vector_kind)
        parts.append(f"{self.rows}x{self.cols}x{self.elem_bytes}B")
        if self.dram_addr is not None:
            parts.append(f"@0x{self.dram_addr:x}")
        parts.append(f"{self.space}+{self.spm_offset}")
        if self.weight_tag is not None:
            parts.append(f"tag={self.weight_tag}")
        parts.append("deps=" + ",".join(map(str, self.deps)))
        return " ".join(parts)


@dataclass(slots=True)
class TileShape:
    m: int
    k: int
    n: int


@dataclass(slots=True)
class TileProgram:
    id: int
    owner_node: str
    request_id: str | None = None
    instrs: list[Instruction] = field(default_factory=list)
    spm_bytes: int = 0
    acc_bytes: int = 0
    preds: set[int] = field(default_factory=set)
    chain_pred: int | None = None       # K-accumulation predecessor tile
    chain_key: tuple | None = None      # core-affinity group for the chain
    chain_tail: bool = False            # last tile of its accumulation chain
    reads: list[tuple[int, int]] = field(default_factory=list)   # (addr, bytes)
    writes: list[tuple[int, int]] = field(default_factory=list)  # logical output regions

    def listing(self) -> str:
        head = (f"tile {self.id} node={self.owner_node} "
                f"spm={self.spm_bytes} acc={self.acc_bytes} "
                f"preds={sorted(self.preds)} chain={self.chain_pred}")
        return "\n".join([head] + [f"  [{i}] {ins.listing()}"
                                   for i, ins in enumerate(self.instrs)])


class AddressMap:
    """Bump allocator handing each tensor a contiguous DRAM range.

    Tensors are placed in graph declaration order, each aligned to the
    DRAM access granularity, so addresses are reproducible run to run.
    """

    def __init__(self, base: int, align: int = 64):
        self.align = align
        self.next = _align_up(base, align)
        self.ranges: dict[str, tuple[int, int]] = {}

    def assign_graph(self, g: ModelGraph) -> None:
        for t in g.tensors.values():
            if t.name in self.ranges:
                continue
            size = t.num_bytes()
            self.ranges[t.name] = (self.next, size)
            self.next = _align_up(self.next + max(size, 1), self.align)

    def addr(self, name: str) -> int:
        return self.ranges[name][0]

    def region(self, name: str) -> tuple[int, int]:
        return self.ranges[name]


def _align_up(x: int, a: int) -> int:
    return (x + a - 1) // a * a


def _divisors(n: int) -> list[int]:
    out = []
    i = 1
    while i * i <= n:
        if n % i == 0:
            out.append(i)
            if i != n // i:
                out.append(n // i)
        i += 1
    out.sort()
    return out


# ---------------------------------------------------------------------------
# Tile shape selection
# ---------------------------------------------------------------------------

def select_tile_shape(node: OpNode, g: ModelGraph, cfg: SimConfig) -> TileShape:
    """Pick the GEMM tile (m, k, n) for a Gemm/MatMul node.

    Candidates are divisor-aligned in each dimension.  Feasible candidates
    maximize scratchpad footprint m*k + k*n; ties prefer larger m, then n,
    then k.  k and n are held at array height/width or above whenever any
    feasible candidate allows it.
    """
    m_dim, k_dim, n_dim = gemm_dims(node, g)
    if min(m_dim, k_dim, n_dim) < 1:
        raise DegenerateShapeError(
            f"node '{node.id}': degenerate GEMM dims "
            f"{m_dim}x{k_dim}x{n_dim}"
        )
    w = DTYPE_BYTES[g.tensor(node.inputs[0]).dtype]
    extra_mn, extra_n = _fused_tile_extras(node)
    spm_cap = cfg.core.spm_partition_bytes
    acc_cap = cfg.core.acc_partition_bytes

    def feasible(m: int, k: int, n: int) -> bool:
        in_bytes = (m * k + k * n + extra_mn * m * n + extra_n * n) * w
        return in_bytes <= spm_cap and m * n * ACC_ELEM_BYTES <= acc_cap

    k_floor = min(k_dim, cfg.core.array_h)
    n_floor = min(n_dim, cfg.core.array_w)
    best = _search_tiles(m_dim, k_dim, n_dim, k_floor, n_floor, feasible)
    if best is None:
        # Array-sized k/n do not fit; retry without the floors.
        best = _search_tiles(m_dim, k_dim, n_dim, 1, 1, feasible)
    if best is None:
        raise FootprintError(
            f"node '{node.id}': no tile of {m_dim}x{k_dim}x{n_dim} fits a "
            f"{spm_cap}B scratchpad partition / {acc_cap}B accumulator partition"
        )
    return TileShape(*best)


def _search_tiles(m_dim, k_dim, n_dim, k_floor, n_floor, feasible):
    best = None
    best_key = None
    for m in _divisors(m_dim):
        for n in _divisors(n_dim):
            if n < n_floor:
                continue
            for k in _divisors(k_dim):
                if k < k_floor:
                    continue
                if not feasible(m, k, n):
                    continue
                key = (m * k + k * n, m, n, k)
                if best_key is None or key > best_key:
                    best_key = key
                    best = (m, k, n)
    return best


def _fused_tile_extras(node: OpNode) -> tuple[int, int]:
    """Extra scratchpad operands implied by fusion: (m*n-sized, n-sized)."""
    skips = sum(1 for tag in node.fused_ops if tag == "Add")
    bias = 1 if node.op_type == "Gemm" and len(node.inputs) - skips >= 3 else 0
    return skips, bias


def gemm_dims(node: OpNode, g: ModelGraph) -> tuple[int, int, int]:
    from .graph import _apply_row_view

    a = list(g.tensor(node.inputs[0]).shape)
    b = list(g.tensor(node.inputs[1]).shape)
    if node.op_type == "Gemm" and node.attrs.get("transA"):
        a = [a[1], a[0]]
    if node.op_type == "Gemm" and node.attrs.get("transB"):
        b = [b[1], b[0]]
    a = _apply_row_view(node, a)
    return a[0], a[1], b[1]


# ---------------------------------------------------------------------------
# Tile program builder
# ---------------------------------------------------------------------------

class _TileBuilder:
    def __init__(self, tile_id: int, node: OpNode, request_id: str | None):
        self.tp = TileProgram(id=tile_id, owner_node=node.id, request_id=request_id)
        self._spm_cursor = 0
        self._acc_cursor = 0

    def spm_alloc(self, nbytes: int) -> int:
        off = self._spm_cursor
        self._spm_cursor += nbytes
        self.tp.spm_bytes += nbytes
        return off

    def acc_alloc(self, nbytes: int) -> int:
        off = self._acc_cursor
        self._acc_cursor += nbytes
        self.tp.acc_bytes += nbytes
        return off

    def emit(self, instr: Instruction) -> int:
        self.tp.instrs.append(instr)
        return len(self.tp.instrs) - 1

    def finish(self, cfg: SimConfig) -> TileProgram:
        if self.tp.spm_bytes > cfg.core.spm_partition_bytes:
            raise FootprintError(
                f"tile {self.tp.id} (node '{self.tp.owner_node}') needs "
                f"{self.tp.spm_bytes}B scratchpad, partition is "
                f"{cfg.core.spm_partition_bytes}B"
            )
        if self.tp.acc_bytes > cfg.core.acc_partition_bytes:
            raise FootprintError(
                f"tile {self.tp.id} (node '{self.tp.owner_node}') needs "
                f"{self.tp.acc_bytes}B accumulator, partition is "
                f"{cfg.core.acc_partition_bytes}B"
            )
        if not self.tp.instrs:
            raise FootprintError(f"tile {self.tp.id} has no instructions")
        return self.tp


def _ceil_div(a: int, b: int) -> int:
    return -(-a // b)


def lower_gemm(node: OpNode, tile: TileShape, g: ModelGraph, addrs: AddressMap,
               cfg: SimConfig, next_tile_id: int,
               request_id: str | None = None) -> list[TileProgram]:
    """Emit the tile grid for a Gemm/MatMul node.

    Grid order is (mi, ni, ki); tiles sharing an output block along K form
    an accumulation chain (only the last emits MVOUT).  Within a tile the
    systolic work is a strict PRELOAD+GEMM pair sequence, one pair per
    array-sized MAC block.
    """
    m_dim, k_dim, n_dim = gemm_dims(node, g)
    w = DTYPE_BYTES[g.tensor(node.inputs[0]).dtype]
    out_t = g.tensor(node.outputs[0])
    out_w = DTYPE_BYTES[out_t.dtype]
    h, aw = cfg.core.array_h, cfg.core.array_w

    a_region = addrs.region(node.inputs[0])
    b_region = addrs.region(node.inputs[1])
    out_region = addrs.region(node.outputs[0])
    _, has_bias = _gemm_extra_inputs(node)
    bias_region = addrs.region(node.inputs[2]) if has_bias else None

    mt, nt, kt = _ceil_div(m_dim, tile.m), _ceil_div(n_dim, tile.n), _ceil_div(k_dim, tile.k)
    tiles: list[TileProgram] = []
    tid = next_tile_id
    chain_last: dict[tuple[int, int], int] = {}

    for mi in range(mt):
        m_rows = min(tile.m, m_dim - mi * tile.m)
        for ni in range(nt):
            n_cols = min(tile.n, n_dim - ni * tile.n)
            for ki in range(kt):
                k_cols = min(tile.k, k_dim - ki * tile.k)
                last_k = ki == kt - 1
                tb = _TileBuilder(tid, node, request_id)
                tp = tb.tp
                if kt > 1:
                    tp.chain_key = (node.id, mi, ni)
                    tp.chain_tail = last_k
                    if ki > 0:
                        tp.chain_pred = chain_last[(mi, ni)]
                chain_last[(mi, ni)] = tid

                a_bytes = m_rows * k_cols * w
                a_addr = a_region[0] + (mi * tile.m * k_dim + ki * tile.k) * w
                i_a = tb.emit(Instruction(
                    "MVIN", m_rows, k_cols, w,
                    dram_addr=a_addr, spm_offset=tb.spm_alloc(a_bytes)))
                tp.reads.append((a_addr, a_bytes))

                b_bytes = k_cols * n_cols * w
                b_addr = b_region[0] + (ki * tile.k * n_dim + ni * tile.n) * w
                i_b = tb.emit(Instruction(
                    "MVIN", k_cols, n_cols, w,
                    dram_addr=b_addr, spm_offset=tb.spm_alloc(b_bytes)))
                tp.reads.append((b_addr, b_bytes))

                out_block = (
                    out_region[0] + (mi * tile.m * n_dim + ni * tile.n) * out_w,
                    m_rows * n_cols * out_w,
                )
                if ki > 0:
                    tp.reads.append(out_block)  # accumulates onto prior partials

                acc_off = tb.acc_alloc(m_rows * n_cols * ACC_ELEM_BYTES)
                last_compute = _emit_mac_blocks(
                    tb, m_rows, k_cols, n_cols, h, aw, i_a, i_b, acc_off)

                if last_k:
                    tail = last_compute
                    if has_bias:
                        bias_bytes = n_cols * w
                        bias_addr = bias_region[0] + ni * tile.n * w
                        i_bias = tb.emit(Instruction(
                            "MVIN", 1, n_cols, w,
                            dram_addr=bias_addr, spm_offset=tb.spm_alloc(bias_bytes)))
                        tp.reads.append((bias_addr, bias_bytes))
                        tail = tb.emit(Instruction(
                            "VECTOR", 1, m_rows * n_cols, ACC_ELEM_BYTES,
                            vector_kind="ADD", space="acc",
                            spm_offset=acc_off, deps=[tail, i_bias]))
                    skip_idx = 2 + (1 if has_bias else 0)
                    for tag in node.fused_ops:
                        deps = [tail]
                        if tag == "Add":
                            skip_region = addrs.region(node.inputs[skip_idx])
                            skip_bytes = m_rows * n_cols * w
                            skip_addr = skip_region[0] + (mi * tile.m * n_dim + ni * tile.n) * w
                            i_skip = tb.emit(Instruction(
                                "MVIN", m_rows, n_cols, w,
                                dram_addr=skip_addr, spm_offset=tb.spm_alloc(skip_bytes)))
                            tp.reads.append((skip_addr, skip_bytes))
                            deps.append(i_skip)
                            skip_idx += 1
                        tail = tb.emit(Instruction(
                            "VECTOR", 1, m_rows * n_cols, ACC_ELEM_BYTES,
                            vector_kind=VECTOR_KIND_OF_OP[tag], space="acc",
                            spm_offset=acc_off, deps=deps))
                    tb.emit(Instruction(
                        "MVOUT", m_rows, n_cols, out_w,
                        dram_addr=out_block[0], space="acc",
                        spm_offset=acc_off, deps=[tail]))
                tp.writes.append(out_block)
                tiles.append(tb.finish(cfg))
                tid += 1
    return tiles


def _gemm_extra_inputs(node: OpNode) -> tuple[int, bool]:
    skips = sum(1 for tag in node.fused_ops if tag == "Add")
    base_inputs = len(node.inputs) - skips
    has_bias = node.op_type == "Gemm" and base_inputs >= 3
    return skips, has_bias


def _emit_mac_blocks(tb: _TileBuilder, m_rows: int, k_cols: int, n_cols: int,
                     h: int, aw: int, i_a: int, i_data: int, acc_off: int) -> int:
    """Strict PRELOAD+GEMM pair sequence covering the tile; returns last index.

    One pair per (m-block, n-block, k-block) with blocks clamped to array
    height/width; pairs chain on the array so weight-register reuse order
    is unambiguous.
    """
    prev_array = None
    last = None
    for mb in range(_ceil_div(m_rows, h)):
        l_rows = min(h, m_rows - mb * h)
        for nb in range(_ceil_div(n_cols, aw)):
            bn = min(aw, n_cols - nb * aw)
            for kb in range(_ceil_div(k_cols, h)):
                bk = min(h, k_cols - kb * h)
                deps_p = [i_data]
                if prev_array is not None:
                    deps_p.append(prev_array)
                p = tb.emit(Instruction(
                    "GEMM_PRELOAD", bk, bn, 0, deps=deps_p))
                gdeps = [p, i_a]
                gm = tb.emit(Instruction(
                    "GEMM", l_rows, bn, 0, space="acc",
                    spm_offset=acc_off, deps=gdeps, weight_tag=p))
                prev_array = gm
                last = gm
    return last


# ---------------------------------------------------------------------------
# Convolution lowering (im2col + GEMM reuse)
# ---------------------------------------------------------------------------

def lower_conv(node: OpNode, g: ModelGraph, addrs: AddressMap, cfg: SimConfig,
               next_tile_id: int, request_id: str | None = None) -> list[TileProgram]:
    """Lower Conv2D as im2col followed by the GEMM block machinery.

    The im2col matrix has shape (batch*out_h*out_w) x (kh*kw*in_ch) x out_ch.
    The contraction axis is never split: input patches stay whole.
    """
    dil = node.attrs.get("dilations", 1)
    dil_vals = (dil, dil) if isinstance(dil, int) else tuple(dil)
    if any(d != 1 for d in dil_vals):
        raise UnsupportedAttributeError(
            f"node '{node.id}': conv dilation {dil_vals} unsupported (must be 1)"
        )
    x = g.tensor(node.inputs[0])
    wt = g.tensor(node.inputs[1])
    out = g.tensor(node.outputs[0])
    nb, in_h, in_w, c = x.shape
    kh, kw, _, oc = wt.shape
    _, oh, ow, _ = out.shape
    sh, _sw = _conv_strides(node)
    m_dim = nb * oh * ow
    k_dim = kh * kw * c
    n_dim = oc
    if min(m_dim, k_dim, n_dim) < 1:
        raise DegenerateShapeError(f"node '{node.id}': empty conv problem")

    w = DTYPE_BYTES[x.dtype]
    out_w = DTYPE_BYTES[out.dtype]
    h, aw = cfg.core.array_h, cfg.core.array_w
    spm_cap = cfg.core.spm_partition_bytes
    acc_cap = cfg.core.acc_partition_bytes
    scan_bytes = in_w * c * w  # one input scanline

    def raw_bytes(m: int) -> int:
        rows = _ceil_div(m, ow) * sh + kh
        crossings = 1 + (m - 1) // (oh * ow)
        return min(x.num_bytes(), rows * scan_bytes * crossings)

    def feasible(m: int, n: int) -> bool:
        in_bytes = raw_bytes(m) + (m * k_dim + k_dim * n) * w
        return in_bytes <= spm_cap and m * n * ACC_ELEM_BYTES <= acc_cap

    n_floor = min(n_dim, aw)
    best = None
    best_key = None
    for floor in (n_floor, 1):
        for m in _divisors(m_dim):
            for n in _divisors(n_dim):
                if n < floor or not feasible(m, n):
                    continue
                key = (m * k_dim + k_dim * n, m, n)
                if best_key is None or key > best_key:
                    best_key, best = key, (m, n)
        if best is not None:
            break
    if best is None:
        raise FootprintError(
            f"node '{node.id}': conv patches ({k_dim} elems) do not fit the "
            f"scratchpad partition at any tile size"
        )
    tile_m, tile_n = best

    x_region = addrs.region(node.inputs[0])
    w_region = addrs.region(node.inputs[1])
    out_region = addrs.region(node.outputs[0])

    tiles: list[TileProgram] = []
    tid = next_tile_id
    mt, nt = _ceil_div(m_dim, tile_m), _ceil_div(n_dim, tile_n)
    for mi in range(mt):
        m_rows = min(tile_m, m_dim - mi * tile_m)
        for ni in range(nt):
            n_cols = min(tile_n, n_dim - ni * tile_n)
            tb = _TileBuilder(tid, node, request_id)
            tp = tb.tp

            rb = raw_bytes(m_rows)
            raw_addr = x_region[0] + min(
                _ceil_div(mi * tile_m, ow) * scan_bytes, max(x_region[1] - rb, 0))
            i_raw = tb.emit(Instruction(
                "MVIN", 1, rb, 1, dram_addr=raw_addr, spm_offset=tb.spm_alloc(rb)))
            tp.reads.append((raw_addr, rb))

            a_off = tb.spm_alloc(m_rows * k_dim * w)
            i_im2col = tb.emit(Instruction(
                "IM2COL", m_rows, k_dim, w, spm_offset=a_off, deps=[i_raw]))

            wb = k_dim * n_cols * w
            w_addr = w_region[0] + ni * tile_n * k_dim * w
            i_w = tb.emit(Instruction(
                "MVIN", k_dim, n_cols, w, dram_addr=w_addr,
                spm_offset=tb.spm_alloc(wb)))
            tp.reads.append((w_addr, wb))

            acc_off = tb.acc_alloc(m_rows * n_cols * ACC_ELEM_BYTES)
            last = _emit_mac_blocks(tb, m_rows, k_dim, n_cols, h, aw,
                                    i_im2col, i_w, acc_off)

            out_block = (
                out_region[0] + (mi * tile_m * n_dim + ni * tile_n) * out_w,
                m_rows * n_cols * out_w,
            )
            tail = last
            skip_idx = 2
            for tag in node.fused_ops:
                deps = [tail]
                if tag == "Add":
                    skip_region = addrs.region(node.inputs[skip_idx])
                    sb = m_rows * n_cols * w
                    s_addr = skip_region[0] + (mi * tile_m * n_dim + ni * tile_n) * w
                    i_skip = tb.emit(Instruction(
                        "MVIN", m_rows, n_cols, w, dram_addr=s_addr,
                        spm_offset=tb.spm_alloc(sb)))
                    tp.reads.append((s_addr, sb))
                    deps.append(i_skip)
                    skip_idx += 1
                tail = tb.emit(Instruction(
                    "VECTOR", 1, m_rows * n_cols, ACC_ELEM_BYTES,
                    vector_kind=VECTOR_KIND_OF_OP[tag], space="acc",
                    spm_offset=acc_off, deps=deps))
            tb.emit(Instruction(
                "MVOUT", m_rows, n_cols, out_w, dram_addr=out_block[0],
                space="acc", spm_offset=acc_off, deps=[tail]))
            tp.writes.append(out_block)
            tiles.append(tb.finish(cfg))
            tid += 1
    return tiles


# ---------------------------------------------------------------------------
# Vector-unit node lowering
# ---------------------------------------------------------------------------

def lower_vector_node(node: OpNode, g: ModelGraph, addrs: AddressMap,
                      cfg: SimConfig, next_tile_id: int,
                      request_id: str | None = None) -> list[TileProgram]:
    """Split an elementwise/normalization node into scratchpad-sized tiles.

    Softmax and LayerNorm tiles always hold whole normalization rows; an
    axis longer than one partition's worth of a row is a configuration
    error, not a split.
    """
    kind = VECTOR_KIND_OF_OP[node.op_type]
    out = g.tensor(node.outputs[0])
    w = DTYPE_BYTES[g.tensor(node.inputs[0]).dtype]
    total = out.num_elements()
    spm_cap = cfg.core.spm_partition_bytes

    n_skips = sum(1 for tag in node.fused_ops if tag == "Add")
    own_inputs = node.inputs[:len(node.inputs) - n_skips]
    skip_inputs = node.inputs[len(node.inputs) - n_skips:]
    if node.op_type in ("Add", "Mul"):
        operands = own_inputs[:2]
    else:
        operands = own_inputs[:1]
    params = own_inputs[1:] if node.op_type == "LayerNorm" else []
    streams = len(operands) + 1 + n_skips

    if node.op_type in ("Softmax", "LayerNorm"):
        axis = node.attrs.get("axis", -1)
        shape = out.shape
        axis_len = shape[axis if axis >= 0 else len(shape) + axis]
        param_bytes = sum(g.tensor(p).num_bytes() for p in params)
        rows_cap = (spm_cap - param_bytes) // (w * axis_len * streams)
        if rows_cap < 1:
            raise AxisTooLargeError(
                f"node '{node.id}': normalization axis of {axis_len} elements "
                f"exceeds one scratchpad partition ({spm_cap}B)"
            )
        n_rows = total // axis_len
        chunk = min(n_rows, rows_cap) * axis_len
    else:
        chunk = min(total, spm_cap // (w * streams))
        if chunk < 1:
            raise FootprintError(
                f"node '{node.id}': scratchpad partition too small for any chunk"
            )
        param_bytes = 0

    tiles: list[TileProgram] = []
    tid = next_tile_id
    offset = 0
    while offset < total:
        count = min(chunk, total - offset)
        tb = _TileBuilder(tid, node, request_id)
        tp = tb.tp
        mv_idx = []
        for opnd in operands:
            region = addrs.region(opnd)
            addr = region[0] + offset * w
            nbytes = count * w
            mv_idx.append(tb.emit(Instruction(
                "MVIN", 1, count, w, dram_addr=addr,
                spm_offset=tb.spm_alloc(nbytes))))
            tp.reads.append((addr, nbytes))
        for p in params:
            region = addrs.region(p)
            mv_idx.append(tb.emit(Instruction(
                "MVIN", 1, region[1], 1, dram_addr=region[0],
                spm_offset=tb.spm_alloc(region[1]))))
            tp.reads.append(region)
        out_off = tb.spm_alloc(count * w)
        v = tb.emit(Instruction(
            "VECTOR", 1, count, w, vector_kind=kind,
            spm_offset=out_off, deps=list(mv_idx)))
        skip_iter = iter(skip_inputs)
        for tag in node.fused_ops:
            deps = [v]
            if tag == "Add":
                sname = next(skip_iter)
                region = addrs.region(sname)
                s_addr = region[0] + offset * w
                i_skip = tb.emit(Instruction(
                    "MVIN", 1, count, w, dram_addr=s_addr,
                    spm_offset=tb.spm_alloc(count * w)))
                tp.reads.append((s_addr, count * w))
                deps.append(i_skip)
            v = tb.emit(Instruction(
                "VECTOR", 1, count, w, vector_kind=VECTOR_KIND_OF_OP[tag],
                spm_offset=out_off, deps=deps))
        out_region = addrs.region(node.outputs[0])
        out_addr = out_region[0] + offset * DTYPE_BYTES[out.dtype]
        tb.emit(Instruction(
            "MVOUT", 1, count, DTYPE_BYTES[out.dtype], dram_addr=out_addr,
            spm_offset=out_off, deps=[v]))
        tp.writes.append((out_addr, count * DTYPE_BYTES[out.dtype]))
        tiles.append(tb.finish(cfg))
        tid += 1
        offset += count
    return tiles


# ---------------------------------------------------------------------------
# Node dispatch and dependency DAG
# ---------------------------------------------------------------------------

def lower_node(node: OpNode, g: ModelGraph, addrs: AddressMap, cfg: SimConfig,
               next_tile_id: int, request_id: str | None = None) -> list[TileProgram]:
    if node.op_type in ("Gemm", "MatMul"):
        tile = select_tile_shape(node, g, cfg)
        return lower_gemm(node, tile, g, addrs, cfg, next_tile_id, request_id)
    if node.op_type == "Conv2D":
        return lower_conv(node, g, addrs, cfg, next_tile_id, request_id)
    return lower_vector_node(node, g, addrs, cfg, next_tile_id, request_id)


def lower_graph(g: ModelGraph, cfg: SimConfig, addrs: AddressMap | None = None,
                request_id: str | None = None,
                start_tile_id: int = 0) -> list[TileProgram]:
    """Lower every node in topological order and wire tile dependencies."""
    from .graph import topological_order

    if addrs is None:
        addrs = AddressMap(cfg.dram_base)
        addrs.assign_graph(g)
    tiles: list[TileProgram] = []
    tid = start_tile_id
    for nid in topological_order(g):
        node = g.node(nid)
        new = lower_node(node, g, addrs, cfg, tid, request_id)
        tiles.extend(new)
        tid += len(new)
    build_tile_dependencies(tiles, g)
    return tiles


def build_tile_dependencies(tiles: list[TileProgram], g: ModelGraph) -> dict[int, set[int]]:
    """Fill each tile's preds: producer-node tiles plus the K-chain predecessor.

    Cross-node dependencies are tracked at whole-tensor granularity (any
    tile of a producer node), intra-node at output-block granularity via
    the accumulation chain.  The result is acyclic because nodes are
    lowered in topological order and chains follow K order.
    """
    producer = g.producers()
    node_inputs = {n.id: n.inputs for n in g.nodes}
    tiles_of_node: dict[str, list[int]] = {}
    for tp in tiles:
        tiles_of_node.setdefault(tp.owner_node, []).append(tp.id)

    result: dict[int, set[int]] = {}
    for tp in tiles:
        preds: set[int] = set()
        for tname in node_inputs[tp.owner_node]:
            pid = producer.get(tname)
            if pid is not None and pid != tp.owner_node:
                preds.update(tiles_of_node.get(pid, ()))
        if tp.chain_pred is not None:
            preds.add(tp.chain_pred)
        tp.preds = preds
        result[tp.id] = preds
    return result
