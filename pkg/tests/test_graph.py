import json

import pytest
from hypothesis import given, strategies as st

from npusim.errors import (
    GraphParseError,
    LinkageError,
    ShapeMismatchError,
    UnboundSymbolError,
    UnsupportedOperatorError,
)
from npusim.graph import (
    ModelGraph,
    OpNode,
    TensorDesc,
    bind_shapes,
    fuse_operators,
    graph_io_names,
    parse_graph,
    serialize_graph,
    topological_order,
    validate_graph,
)
from npusim.models import build_synthetic_model


def make_doc(tensors, nodes, name="g"):
    return json.dumps({"name": name, "tensors": tensors, "nodes": nodes})


def t(name, shape, dtype="fp16", kind="activation"):
    return {"name": name, "dtype": dtype, "shape": shape, "kind": kind}


def n(nid, op, inputs, outputs, attrs=None):
    return {"id": nid, "op_type": op, "attrs": attrs or {},
            "inputs": inputs, "outputs": outputs}


class TestParse:
    def test_single_gemm(self):
        doc = make_doc(
            [t("A", [4, 4], kind="input"), t("B", [4, 4], kind="weight"),
             t("Y", [4, 4], kind="output")],
            [n("g0", "Gemm", ["A", "B"], ["Y"])],
        )
        g = parse_graph(doc)
        assert len(g.nodes) == 1
        assert len(g.tensors) == 3
        assert g.nodes[0].op_type == "Gemm"

    def test_undeclared_tensor_names_it(self):
        doc = make_doc([t("A", [4, 4], kind="input")],
                       [n("g0", "ReLU", ["t9"], ["A"])])
        with pytest.raises(LinkageError, match="t9"):
            parse_graph(doc)

    def test_malformed_json_has_location(self):
        with pytest.raises(GraphParseError, match="line"):
            parse_graph("{not json")

    def test_unknown_op_names_node(self):
        doc = make_doc([t("A", [4], kind="input")],
                       [n("weird", "FancyOp", ["A"], ["A"])])
        with pytest.raises(UnsupportedOperatorError, match="weird"):
            parse_graph(doc)

    def test_symbolic_dims_preserved(self):
        doc = make_doc([t("A", [1, "seq_len"], kind="input")], [])
        g = parse_graph(doc)
        assert g.tensors["A"].shape == [1, "seq_len"]

    def test_exporter_style_mlp_roundtrip(self):
        g = build_synthetic_model("mlp", layers=2, width=32)
        g2 = parse_graph(serialize_graph(g))
        assert [x.op_type for x in g2.nodes] == ["Gemm", "GELU", "Gemm"]
        gelu = g2.nodes[1]
        assert gelu.inputs[0] in g2.producers()
        assert g2.producers()[gelu.inputs[0]] == "fc0"


@st.composite
def random_graph(draw):
    """Small random DAG over the supported unary/binary ops."""
    n_t = draw(st.integers(2, 6))
    g = ModelGraph(name=draw(st.text("abcxyz", min_size=1, max_size=6)))
    names = [f"t{i}" for i in range(n_t)]
    for i, name in enumerate(names):
        shape = draw(st.lists(
            st.one_of(st.integers(1, 8), st.sampled_from(["s0", "s1"])),
            min_size=1, max_size=3))
        kind = "input" if i == 0 else draw(st.sampled_from(["activation", "weight"]))
        g.tensors[name] = TensorDesc(name, draw(st.sampled_from(["int8", "fp16", "fp32"])),
                                     shape, kind)
    n_nodes = draw(st.integers(0, 4))
    for j in range(n_nodes):
        src = draw(st.sampled_from(names[: max(1, n_t - 1)]))
        dst = draw(st.sampled_from(names))
        op = draw(st.sampled_from(["ReLU", "GELU", "Softmax"]))
        g.nodes.append(OpNode(id=f"n{j}", op_type=op, inputs=[src], outputs=[dst]))
    return g


class TestRoundTrip:
    @given(random_graph())
    def test_parse_serialize_identity(self, g):
        assert parse_graph(serialize_graph(g)) == g

    @pytest.mark.parametrize("kind,params", [
        ("gemm", {"m": 8, "k": 8, "n": 8}),
        ("mlp", {"layers": 2, "width": 16}),
        ("conv_block", {"in_ch": 4, "out_ch": 8, "hw": 8}),
        ("transformer_block", {"d_model": 64, "heads": 8, "kv_heads": 2}),
    ])
    def test_builders_roundtrip(self, kind, params):
        g = build_synthetic_model(kind, **params)
        assert parse_graph(serialize_graph(g)) == g


class TestValidate:
    def test_valid_chain_empty_report(self):
        g = build_synthetic_model("mlp", layers=2, width=8)
        assert validate_graph(g) == []

    def test_cycle_names_both_nodes(self):
        doc = make_doc(
            [t("a", [4]), t("b", [4])],
            [n("A", "ReLU", ["b"], ["a"]), n("B", "ReLU", ["a"], ["b"])],
        )
        g = parse_graph(doc)
        report = validate_graph(g)
        cycles = [v for v in report if v.kind == "cycle"]
        assert len(cycles) == 1
        assert "A" in cycles[0].message and "B" in cycles[0].message

    def test_conv_arity_violation(self):
        doc = make_doc([t("x", [1, 8, 8, 4], kind="input"), t("y", [1, 8, 8, 4])],
                       [n("c0", "Conv2D", ["x"], ["y"])])
        report = validate_graph(parse_graph(doc))
        assert any(v.kind == "arity" and v.subject == "c0" for v in report)

    def test_multi_producer(self):
        doc = make_doc(
            [t("x", [4], kind="input"), t("y", [4])],
            [n("p", "ReLU", ["x"], ["y"]), n("q", "GELU", ["x"], ["y"])],
        )
        report = validate_graph(parse_graph(doc))
        assert any(v.kind == "multi-producer" and v.subject == "y" for v in report)


class TestBindShapes:
    def test_kv_len_binding(self):
        doc = make_doc(
            [t("q", [1, 8], kind="input"), t("k", [8, "kv_len"], kind="input"),
             t("s", [1, "kv_len"], kind="output")],
            [n("mm", "MatMul", ["q", "k"], ["s"])],
        )
        g = bind_shapes(parse_graph(doc), {"kv_len": 512})
        assert g.tensors["s"].shape == [1, 512]

    def test_missing_binding_names_symbol(self):
        doc = make_doc([t("k", [8, "kv_len"], kind="input")], [])
        with pytest.raises(UnboundSymbolError, match="kv_len"):
            bind_shapes(parse_graph(doc), {})

    def test_inner_dim_mismatch_names_node(self):
        doc = make_doc(
            [t("a", [8, "k"], kind="input"), t("b", [16, 4], kind="input"),
             t("y", [8, 4], kind="output")],
            [n("mm", "MatMul", ["a", "b"], ["y"])],
        )
        with pytest.raises(ShapeMismatchError, match="mm"):
            bind_shapes(parse_graph(doc), {"k": 8})

    def test_original_untouched(self):
        g = build_synthetic_model("transformer_block", d_model=32, heads=4)
        before = serialize_graph(g)
        bind_shapes(g, {"batch": 2, "kv_len": 16})
        assert serialize_graph(g) == before

    def test_idempotent_on_concrete(self):
        g = build_synthetic_model("gemm", m=8, k=8, n=8)
        b1 = bind_shapes(g, {})
        b2 = bind_shapes(b1, {})
        assert b1 == b2


class TestFusion:
    def test_gemm_gelu_chain(self):
        g = build_synthetic_model("mlp", layers=2, width=16)
        f = fuse_operators(g)
        assert [x.op_type for x in f.nodes] == ["Gemm", "Gemm"]
        assert f.nodes[0].fused_ops == ["GELU"]
        assert graph_io_names(f) == graph_io_names(g)

    def test_lone_softmax_unchanged(self):
        doc = make_doc([t("x", [4, 4], kind="input"), t("y", [4, 4], kind="output")],
                       [n("sm", "Softmax", ["x"], ["y"])])
        g = parse_graph(doc)
        f = fuse_operators(g)
        assert f == g

    def test_layernorm_absorbs_skip_add(self):
        doc = make_doc(
            [t("x", [4, 8], kind="input"), t("skip", [4, 8], kind="input"),
             t("ln", [4, 8]), t("y", [4, 8], kind="output")],
            [n("norm", "LayerNorm", ["x"], ["ln"]),
             n("add", "Add", ["ln", "skip"], ["y"])],
        )
        f = fuse_operators(parse_graph(doc))
        assert len(f.nodes) == 1
        assert f.nodes[0].op_type == "LayerNorm"
        assert f.nodes[0].fused_ops == ["Add"]
        assert "skip" in f.nodes[0].inputs

    def test_no_fuse_through_graph_output(self):
        # The Gemm's result is itself a graph output; absorbing the ReLU
        # would erase it.
        doc = make_doc(
            [t("a", [4, 4], kind="input"), t("b", [4, 4], kind="weight"),
             t("y", [4, 4], kind="output"), t("z", [4, 4], kind="output")],
            [n("g0", "Gemm", ["a", "b"], ["y"]), n("r0", "ReLU", ["y"], ["z"])],
        )
        f = fuse_operators(parse_graph(doc))
        assert len(f.nodes) == 2

    @pytest.mark.parametrize("kind,params", [
        ("mlp", {"layers": 3, "width": 16}),
        ("conv_block", {"in_ch": 4, "out_ch": 8, "hw": 8, "layers": 2}),
        ("transformer_block", {"d_model": 64, "heads": 8, "kv_heads": 2}),
    ])
    def test_io_multiset_preserved(self, kind, params):
        g = build_synthetic_model(kind, **params)
        assert graph_io_names(fuse_operators(g)) == graph_io_names(g)


class TestTopologicalOrder:
    def test_chain(self):
        g = build_synthetic_model("mlp", layers=2, width=8)
        assert topological_order(g) == ["fc0", "gelu0", "fc1"]

    def test_diamond_tie_break(self):
        doc = make_doc(
            [t("x", [4], kind="input"), t("p", [4]), t("q", [4]),
             t("r", [4]), t("y", [4], kind="output")],
            [n("A", "ReLU", ["x"], ["p"]),
             n("B", "GELU", ["p"], ["q"]),
             n("C", "Softmax", ["p"], ["r"]),
             n("D", "Add", ["q", "r"], ["y"])],
        )
        assert topological_order(parse_graph(doc)) == ["A", "B", "C", "D"]

    def test_single_node(self):
        g = build_synthetic_model("gemm", m=4, k=4, n=4)
        assert topological_order(g) == ["gemm0"]

    @pytest.mark.parametrize("kind,params", [
        ("transformer_block", {"d_model": 32, "heads": 4, "kv_heads": 2}),
        ("conv_block", {"in_ch": 2, "out_ch": 4, "hw": 4, "layers": 3}),
    ])
    def test_permutation_respecting_edges(self, kind, params):
        g = build_synthetic_model(kind, **params)
        order = topological_order(g)
        assert sorted(order) == sorted(x.id for x in g.nodes)
        pos = {nid: i for i, nid in enumerate(order)}
        producer = g.producers()
        for node in g.nodes:
            for tname in node.inputs:
                if tname in producer:
                    assert pos[producer[tname]] < pos[node.id]
