"""Compute-graph IR: parsing, validation, shape binding, fusion, ordering.

The simulator consumes DNN models in a neutral JSON form: a table of
tensors (with possibly-symbolic shapes) plus a list of operator nodes
whose edges are implied by tensor producers/consumers.  Everything here
is a pure value transformation; graphs are never mutated in place.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field

from .errors import (
    GraphParseError,
    LinkageError,
    ShapeMismatchError,
    UnboundSymbolError,
    UnsupportedOperatorError,
)

Dim = int | str

DTYPE_BYTES = {"int8": 1, "fp16": 2, "fp32": 4}

TENSOR_KINDS = ("input", "output", "weight", "activation")

# op_type -> (min inputs, max inputs, outputs)
OP_SIGNATURES = {
    "Gemm": (2, 3, 1),
    "MatMul": (2, 2, 1),
    "Conv2D": (2, 3, 1),
    "Add": (2, 2, 1),
    "Mul": (2, 2, 1),
    "GELU": (1, 1, 1),
    "ReLU": (1, 1, 1),
    "Softmax": (1, 1, 1),
    "LayerNorm": (1, 3, 1),
}

ACTIVATION_OPS = ("GELU", "ReLU")

# Fusion rules: host op_type -> absorbable consumer op_types.
FUSABLE_INTO = {
    "Conv2D": ("Add", "GELU", "ReLU"),
    "Gemm": ("Add", "GELU", "ReLU"),
    "MatMul": ("Add", "GELU", "ReLU"),
    "LayerNorm": ("Add",),
}


@dataclass
class TensorDesc:
    name: str
    dtype: str
    shape: list[Dim]
    kind: str

    @property
    def is_concrete(self) -> bool:
        return all(isinstance(d, int) for d in self.shape)

    def num_elements(self) -> int:
        if not self.is_concrete:
            raise UnboundSymbolError(
                f"tensor '{self.name}' has symbolic dims {self.shape}"
            )
        n = 1
        for d in self.shape:
            n *= d
        return n

    def num_bytes(self) -> int:
        return self.num_elements() * DTYPE_BYTES[self.dtype]


@dataclass
class OpNode:
    id: str
    op_type: str
    attrs: dict = field(default_factory=dict)
    inputs: list[str] = field(default_factory=list)
    outputs: list[str] = field(default_factory=list)
    fused_ops: list[str] = field(default_factory=list)


@dataclass
class ModelGraph:
    name: str
    tensors: dict[str, TensorDesc] = field(default_factory=dict)
    nodes: list[OpNode] = field(default_factory=list)

    def tensor(self, name: str) -> TensorDesc:
        try:
            return self.tensors[name]
        except KeyError:
            raise LinkageError(f"undeclared tensor '{name}'") from None

    def producers(self) -> dict[str, str]:
        """Map tensor name -> producing node id (at most one per tensor)."""
        out: dict[str, str] = {}
        for node in self.nodes:
            for t in node.outputs:
                out.setdefault(t, node.id)
        return out

    def node(self, node_id: str) -> OpNode:
        for n in self.nodes:
            if n.id == node_id:
                return n
        raise KeyError(node_id)

    def symbols(self) -> set[str]:
        syms: set[str] = set()
        for t in self.tensors.values():
            syms.update(d for d in t.shape if isinstance(d, str))
        return syms


# ---------------------------------------------------------------------------
# Parsing and serialization
# ---------------------------------------------------------------------------

def parse_graph(text: str) -> ModelGraph:
    """Parse the neutral JSON graph format into a ModelGraph.

    Symbolic dims (strings) are preserved; they are bound later via
    bind_shapes.  Raises GraphParseError / UnsupportedOperatorError /
    LinkageError as appropriate.
    """
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise GraphParseError(
            f"malformed JSON at line {e.lineno}, column {e.colno}: {e.msg}"
        ) from None
    if not isinstance(doc, dict):
        raise GraphParseError("top-level document must be a JSON object")
    for key in ("name", "tensors", "nodes"):
        if key not in doc:
            raise GraphParseError(f"missing top-level key '{key}'")

    g = ModelGraph(name=str(doc["name"]))
    for i, entry in enumerate(doc["tensors"]):
        t = _parse_tensor(entry, i)
        if t.name in g.tensors:
            raise GraphParseError(f"duplicate tensor name '{t.name}'")
        g.tensors[t.name] = t

    seen_ids: set[str] = set()
    for i, entry in enumerate(doc["nodes"]):
        node = _parse_node(entry, i)
        if node.id in seen_ids:
            raise GraphParseError(f"duplicate node id '{node.id}'")
        seen_ids.add(node.id)
        for tname in list(node.inputs) + list(node.outputs):
            if tname not in g.tensors:
                raise LinkageError(
                    f"node '{node.id}' references undeclared tensor '{tname}'"
                )
        g.nodes.append(node)
    return g


def _parse_tensor(entry: dict, index: int) -> TensorDesc:
    if not isinstance(entry, dict):
        raise GraphParseError(f"tensors[{index}] is not an object")
    try:
        name, dtype, shape, kind = (
            entry["name"], entry["dtype"], entry["shape"], entry["kind"],
        )
    except KeyError as e:
        raise GraphParseError(f"tensors[{index}] missing field {e}") from None
    if dtype not in DTYPE_BYTES:
        raise GraphParseError(
            f"tensor '{name}': unknown dtype '{dtype}' "
            f"(supported: {', '.join(DTYPE_BYTES)})"
        )
    if kind not in TENSOR_KINDS:
        raise GraphParseError(f"tensor '{name}': unknown kind '{kind}'")
    dims: list[Dim] = []
    for d in shape:
        if isinstance(d, bool) or not isinstance(d, (int, str)):
            raise GraphParseError(f"tensor '{name}': bad dim {d!r}")
        if isinstance(d, int) and d < 0:
            raise GraphParseError(f"tensor '{name}': negative dim {d}")
        dims.append(d)
    return TensorDesc(name=str(name), dtype=dtype, shape=dims, kind=kind)


def _parse_node(entry: dict, index: int) -> OpNode:
    if not isinstance(entry, dict):
        raise GraphParseError(f"nodes[{index}] is not an object")
    try:
        node_id, op_type = entry["id"], entry["op_type"]
    except KeyError as e:
        raise GraphParseError(f"nodes[{index}] missing field {e}") from None
    if op_type not in OP_SIGNATURES:
        raise UnsupportedOperatorError(
            f"node '{node_id}': unsupported op_type '{op_type}'"
        )
    return OpNode(
        id=str(node_id),
        op_type=op_type,
        attrs=dict(entry.get("attrs", {})),
        inputs=[str(x) for x in entry.get("inputs", [])],
        outputs=[str(x) for x in entry.get("outputs", [])],
        fused_ops=[str(x) for x in entry.get("fused_ops", [])],
    )


def serialize_graph(g: ModelGraph) -> str:
    """Inverse of parse_graph (round-trip identity on ModelGraph)."""
    doc = {
        "name": g.name,
        "tensors": [
            {"name": t.name, "dtype": t.dtype, "shape": list(t.shape), "kind": t.kind}
            for t in g.tensors.values()
        ],
        "nodes": [
            {
                "id": n.id,
                "op_type": n.op_type,
                "attrs": n.attrs,
                "inputs": list(n.inputs),
                "outputs": list(n.outputs),
                "fused_ops": list(n.fused_ops),
            }
            for n in g.nodes
        ],
    }
    return json.dumps(doc, indent=2)


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------

@dataclass
class Violation:
    kind: str          # cycle | arity | multi-producer | no-producer | fused-tag
    subject: str       # node or tensor name
    message: str


def validate_graph(g: ModelGraph) -> list[Violation]:
    """Collect all structural invariant violations; empty list means valid."""
    report: list[Violation] = []

    for node in g.nodes:
        lo, hi, n_out = OP_SIGNATURES[node.op_type]
        if not (lo <= len(node.inputs) <= hi):
            report.append(Violation(
                "arity", node.id,
                f"node '{node.id}' ({node.op_type}) has {len(node.inputs)} "
                f"inputs, expected {lo}" + (f"..{hi}" if hi != lo else ""),
            ))
        if len(node.outputs) != n_out:
            report.append(Violation(
                "arity", node.id,
                f"node '{node.id}' ({node.op_type}) has {len(node.outputs)} "
                f"outputs, expected {n_out}",
            ))
        allowed = FUSABLE_INTO.get(node.op_type, ())
        for tag in node.fused_ops:
            if tag not in allowed:
                report.append(Violation(
                    "fused-tag", node.id,
                    f"node '{node.id}' carries fused tag '{tag}' not permitted "
                    f"for {node.op_type}",
                ))

    producers: dict[str, list[str]] = {}
    for node in g.nodes:
        for t in node.outputs:
            producers.setdefault(t, []).append(node.id)
    for tname, prods in producers.items():
        if len(prods) > 1:
            report.append(Violation(
                "multi-producer", tname,
                f"tensor '{tname}' produced by multiple nodes: {', '.join(prods)}",
            ))
    consumed = {t for n in g.nodes for t in n.inputs}
    for t in g.tensors.values():
        if t.kind in ("input", "weight"):
            continue
        if t.name not in producers and (t.name in consumed or t.kind == "output"):
            report.append(Violation(
                "no-producer", t.name,
                f"tensor '{t.name}' (kind={t.kind}) has no producer",
            ))

    report.extend(_find_cycles(g))
    return report


def _find_cycles(g: ModelGraph) -> list[Violation]:
    producer = g.producers()
    index = {n.id: n for n in g.nodes}
    color: dict[str, int] = {}  # 0 unvisited / 1 on stack / 2 done
    out: list[Violation] = []

    def visit(nid: str, stack: list[str]) -> None:
        color[nid] = 1
        stack.append(nid)
        for tname in index[nid].inputs:
            pid = producer.get(tname)
            if pid is None:
                continue
            if color.get(pid, 0) == 1:
                cyc = stack[stack.index(pid):]
                out.append(Violation(
                    "cycle", pid,
                    "dependency cycle through nodes: " + " -> ".join(cyc + [pid]),
                ))
            elif color.get(pid, 0) == 0:
                visit(pid, stack)
        stack.pop()
        color[nid] = 2

    for node in g.nodes:
        if color.get(node.id, 0) == 0:
            visit(node.id, [])
    return out


# ---------------------------------------------------------------------------
# Topological order
# ---------------------------------------------------------------------------

def topological_order(g: ModelGraph) -> list[str]:
    """Node ids, producers before consumers, file order as tie-break."""
    producer = g.producers()
    pos = {n.id: i for i, n in enumerate(g.nodes)}
    pending: dict[str, int] = {}
    dependents: dict[str, list[str]] = {n.id: [] for n in g.nodes}
    for node in g.nodes:
        deps = {producer[t] for t in node.inputs if t in producer}
        deps.discard(node.id)
        pending[node.id] = len(deps)
        for d in deps:
            dependents[d].append(node.id)

    import heapq
    ready = [pos[nid] for nid, c in pending.items() if c == 0]
    heapq.heapify(ready)
    order: list[str] = []
    while ready:
        nid = g.nodes[heapq.heappop(ready)].id
        order.append(nid)
        for succ in dependents[nid]:
            pending[succ] -= 1
            if pending[succ] == 0:
                heapq.heappush(ready, pos[succ])
    if len(order) != len(g.nodes):
        stuck = sorted(set(pending) - set(order))
        raise GraphParseError(f"graph has a cycle involving nodes: {stuck}")
    return order


# ---------------------------------------------------------------------------
# Shape binding and inference
# ---------------------------------------------------------------------------

def bind_shapes(g: ModelGraph, bindings: dict[str, int]) -> ModelGraph:
    """Return a fully concrete copy of g with symbols substituted.

    All node output shapes are recomputed from inputs; the original graph
    is left untouched.
    """
    out = copy.deepcopy(g)
    for t in out.tensors.values():
        new_shape: list[Dim] = []
        for d in t.shape:
            if isinstance(d, str):
                if d not in bindings:
                    raise UnboundSymbolError(f"no binding for symbol '{d}'")
                v = bindings[d]
                if not isinstance(v, int) or v < 0:
                    raise UnboundSymbolError(f"binding for '{d}' must be a non-negative int")
                new_shape.append(v)
            else:
                new_shape.append(d)
        t.shape = new_shape

    for nid in topological_order(out):
        node = out.node(nid)
        inferred = infer_output_shapes(node, out)
        for tname, shape in zip(node.outputs, inferred):
            out.tensors[tname].shape = shape
    return out


def infer_output_shapes(node: OpNode, g: ModelGraph) -> list[list[int]]:
    """Output shapes of one node from its (concrete) input shapes."""
    shapes = [g.tensor(t).shape for t in node.inputs]
    op = node.op_type
    if op in ("Gemm", "MatMul"):
        a, b = shapes[0], shapes[1]
        if len(a) != 2 or len(b) != 2:
            raise ShapeMismatchError(f"node '{node.id}': {op} expects 2-D operands")
        if op == "Gemm" and node.attrs.get("transA"):
            a = [a[1], a[0]]
        if op == "Gemm" and node.attrs.get("transB"):
            b = [b[1], b[0]]
        a = _apply_row_view(node, a)
        if a[1] != b[0]:
            raise ShapeMismatchError(
                f"node '{node.id}': inner dims disagree ({a[1]} vs {b[0]})"
            )
        return [[a[0], b[1]]]
    if op == "Conv2D":
        x, w = shapes[0], shapes[1]
        if len(x) != 4 or len(w) != 4:
            raise ShapeMismatchError(
                f"node '{node.id}': Conv2D expects NHWC input and KhKwCiCo weight"
            )
        n, h, wd, c = x
        kh, kw, ci, co = w
        if c != ci:
            raise ShapeMismatchError(
                f"node '{node.id}': input channels {c} != weight channels {ci}"
            )
        sh, sw = _conv_strides(node)
        ph, pw = _conv_pads(node)
        oh = (h + 2 * ph - kh) // sh + 1
        ow = (wd + 2 * pw - kw) // sw + 1
        if oh < 1 or ow < 1:
            raise ShapeMismatchError(f"node '{node.id}': empty conv output {oh}x{ow}")
        return [[n, oh, ow, co]]
    if op in ("Add", "Mul"):
        a, b = shapes[0], shapes[1]
        if list(a) != list(b):
            raise ShapeMismatchError(
                f"node '{node.id}': elementwise operand shapes differ ({a} vs {b})"
            )
        return [list(a)]
    # Unary shape-preserving: GELU, ReLU, Softmax, LayerNorm.
    return [list(shapes[0])]


def _apply_row_view(node: OpNode, a: list[int]) -> list[int]:
    """Element-preserving row reinterpretation of the left GEMM operand.

    row_fold=f views [M, K] as [M*f, K/f]; row_unfold=f as [M/f, K*f].
    Lets head-grouped attention stack or unstack query rows without a
    reshape operator; element count (hence traffic) is untouched.
    """
    fold = node.attrs.get("row_fold", 1)
    unfold = node.attrs.get("row_unfold", 1)
    m, k = a
    if fold != 1:
        if k % fold:
            raise ShapeMismatchError(
                f"node '{node.id}': row_fold {fold} does not divide inner dim {k}"
            )
        m, k = m * fold, k // fold
    if unfold != 1:
        if m % unfold:
            raise ShapeMismatchError(
                f"node '{node.id}': row_unfold {unfold} does not divide rows {m}"
            )
        m, k = m // unfold, k * unfold
    return [m, k]


def _conv_strides(node: OpNode) -> tuple[int, int]:
    s = node.attrs.get("strides", 1)
    return (s, s) if isinstance(s, int) else (s[0], s[1])


def _conv_pads(node: OpNode) -> tuple[int, int]:
    p = node.attrs.get("pads", 0)
    return (p, p) if isinstance(p, int) else (p[0], p[1])


# ---------------------------------------------------------------------------
# Operator fusion
# ---------------------------------------------------------------------------

def fuse_operators(g: ModelGraph) -> ModelGraph:
    """Absorb elementwise consumers into producer nodes.

    Single forward pass in topological order, longest match first: a host
    keeps absorbing its sole consumer while a rule applies.  Graph-level
    inputs and outputs are never touched; non-matching graphs pass through
    unchanged (as a copy).
    """
    out = copy.deepcopy(g)
    order = topological_order(out)
    pos = {nid: i for i, nid in enumerate(order)}
    removed: set[str] = set()

    for nid in order:
        if nid in removed:
            continue
        host = out.node(nid)
        rules = FUSABLE_INTO.get(host.op_type)
        if not rules:
            continue
        while True:
            cand = _fusion_candidate(out, host, rules, pos, removed)
            if cand is None:
                break
            _absorb(out, host, cand, removed)
    out.nodes = [n for n in out.nodes if n.id not in removed]
    return out


def _fusion_candidate(g, host, rules, pos, removed):
    if len(host.outputs) != 1:
        return None
    t = host.outputs[0]
    if g.tensors[t].kind == "output":
        return None  # fusing would erase a graph-level output
    consumers = [n for n in g.nodes
                 if n.id not in removed and n.id != host.id and t in n.inputs]
    if len(consumers) != 1:
        return None
    c = consumers[0]
    if c.op_type not in rules or c.fused_ops:
        return None
    if c.op_type == "Add":
        others = [x for x in c.inputs if x != t]
        if len(others) != 1:
            return None
        # The skip operand must not depend on the host's own output.
        prod = g.producers().get(others[0])
        if prod is not None and (prod in removed or pos.get(prod, 1 << 30) >= pos[host.id]):
            return None
    return c


def _absorb(g: ModelGraph, host: OpNode, absorbed: OpNode, removed: set[str]) -> None:
    t = host.outputs[0]
    if absorbed.op_type == "Add":
        skip = next(x for x in absorbed.inputs if x != t)
        host.inputs.append(skip)
    host.fused_ops.append(absorbed.op_type)
    host.outputs = list(absorbed.outputs)
    removed.add(absorbed.id)
    del g.tensors[t]


def graph_io_names(g: ModelGraph) -> tuple[list[str], list[str]]:
    """Graph-level (inputs, outputs) as name multisets, for fusion checks."""
    ins = sorted(t.name for t in g.tensors.values() if t.kind == "input")
    outs = sorted(t.name for t in g.tensors.values() if t.kind == "output")
    return ins, outs
