"""Synthetic model builders: GEMM, MLP, conv stacks, transformer blocks.

The transformer block carries a symbolic "kv_len" so the generative driver
can grow the KV cache each step, and a symbolic "batch" bound per request.
Grouped-query attention falls out of kv_heads < heads: each KV group holds
one score/softmax/context chain whose cache tensors shrink with the group
count while the query rows stack via row_fold.
"""

from __future__ import annotations

from .errors import ConfigError
from .graph import ModelGraph, OpNode, TensorDesc


def build_synthetic_model(kind: str, **params) -> ModelGraph:
    """Dispatch on kind: gemm | mlp | conv_block | transformer_block."""
    builders = {
        "gemm": build_gemm,
        "mlp": build_mlp,
        "conv_block": build_conv_block,
        "transformer_block": build_transformer_block,
    }
    if kind not in builders:
        raise ConfigError(f"unknown synthetic model kind '{kind}'")
    return builders[kind](**params)


def _tensor(g: ModelGraph, name: str, dtype: str, shape, kind: str) -> str:
    g.tensors[name] = TensorDesc(name=name, dtype=dtype, shape=list(shape), kind=kind)
    return name


def _node(g: ModelGraph, nid: str, op: str, inputs, outputs, attrs=None) -> None:
    g.nodes.append(OpNode(id=nid, op_type=op, attrs=dict(attrs or {}),
                          inputs=list(inputs), outputs=list(outputs)))


def build_gemm(m: int, k: int, n: int, dtype: str = "fp16") -> ModelGraph:
    if min(m, k, n) < 1:
        raise ConfigError("gemm dims must be positive")
    g = ModelGraph(name=f"gemm_{m}x{k}x{n}")
    _tensor(g, "a", dtype, [m, k], "input")
    _tensor(g, "b", dtype, [k, n], "weight")
    _tensor(g, "y", dtype, [m, n], "output")
    _node(g, "gemm0", "Gemm", ["a", "b"], ["y"])
    return g


def build_mlp(layers: int, width: int, rows: int = 1, dtype: str = "fp16") -> ModelGraph:
    """Gemm -> GELU -> Gemm -> ... (`layers` Gemms, GELU between them)."""
    if layers < 1 or width < 1 or rows < 1:
        raise ConfigError("mlp needs layers >= 1, width >= 1, rows >= 1")
    g = ModelGraph(name=f"mlp_{layers}x{width}")
    cur = _tensor(g, "x", dtype, [rows, width], "input")
    for i in range(layers):
        w = _tensor(g, f"w{i}", dtype, [width, width], "weight")
        last = i == layers - 1
        out = _tensor(g, f"h{i}", dtype, [rows, width],
                      "output" if last else "activation")
        _node(g, f"fc{i}", "Gemm", [cur, w], [out])
        cur = out
        if not last:
            act = _tensor(g, f"a{i}", dtype, [rows, width], "activation")
            _node(g, f"gelu{i}", "GELU", [cur], [act])
            cur = act
    return g


def build_conv_block(in_ch: int, out_ch: int, hw: int, kernel: int = 3,
                     stride: int = 1, layers: int = 1,
                     dtype: str = "int8") -> ModelGraph:
    """Conv2D -> ReLU stacks over an NHWC input with symbolic batch."""
    if min(in_ch, out_ch, hw, kernel, stride, layers) < 1:
        raise ConfigError("conv_block dims must be positive")
    g = ModelGraph(name=f"conv_block_{layers}x{out_ch}")
    pads = kernel // 2
    cur = _tensor(g, "x", dtype, ["batch", hw, hw, in_ch], "input")
    ch = in_ch
    size = hw
    for i in range(layers):
        w = _tensor(g, f"w{i}", dtype, [kernel, kernel, ch, out_ch], "weight")
        o_size = (size + 2 * pads - kernel) // stride + 1
        conv_out = _tensor(g, f"c{i}", dtype, ["batch", o_size, o_size, out_ch],
                           "activation")
        _node(g, f"conv{i}", "Conv2D", [cur, w], [conv_out],
              {"strides": stride, "pads": pads})
        last = i == layers - 1
        act = _tensor(g, f"r{i}", dtype, ["batch", o_size, o_size, out_ch],
                      "output" if last else "activation")
        _node(g, f"relu{i}", "ReLU", [conv_out], [act])
        cur = act
        ch = out_ch
        size = o_size
    return g


def build_transformer_block(d_model: int, heads: int, kv_heads: int | None = None,
                            d_head: int | None = None, ffn_mult: int = 4,
                            dtype: str = "fp16") -> ModelGraph:
    """One decode-phase transformer block with grouped-query attention.

    Query/score/context chains are emitted per KV group; kv_heads == heads
    is plain multi-head attention.  The KV caches are graph inputs of shape
    (d_head x kv_len) / (kv_len x d_head) per group, so KV traffic scales
    with kv_heads and grows with the bound kv_len.
    """
    kv_heads = heads if kv_heads is None else kv_heads
    if heads < 1 or kv_heads < 1 or heads % kv_heads:
        raise ConfigError("heads must be a positive multiple of kv_heads")
    d_head = d_model // heads if d_head is None else d_head
    if d_head < 1 or d_model < 1:
        raise ConfigError("d_model and d_head must be positive")
    hg = heads // kv_heads  # query heads per KV group

    g = ModelGraph(name=f"transformer_d{d_model}_h{heads}_kv{kv_heads}")
    x = _tensor(g, "x", dtype, ["batch", d_model], "input")
    xn = _tensor(g, "ln1_out", dtype, ["batch", d_model], "activation")
    _node(g, "ln1", "LayerNorm", [x], [xn])

    group_outs = []
    for gi in range(kv_heads):
        wq = _tensor(g, f"w_q{gi}", dtype, [d_model, hg * d_head], "weight")
        q = _tensor(g, f"q{gi}", dtype, ["batch", hg * d_head], "activation")
        _node(g, f"q_proj{gi}", "Gemm", [xn, wq], [q])

        wk = _tensor(g, f"w_k{gi}", dtype, [d_model, d_head], "weight")
        k_cur = _tensor(g, f"k_cur{gi}", dtype, ["batch", d_head], "output")
        _node(g, f"k_proj{gi}", "Gemm", [xn, wk], [k_cur])
        wv = _tensor(g, f"w_v{gi}", dtype, [d_model, d_head], "weight")
        v_cur = _tensor(g, f"v_cur{gi}", dtype, ["batch", d_head], "output")
        _node(g, f"v_proj{gi}", "Gemm", [xn, wv], [v_cur])

        k_cache = _tensor(g, f"k_cache{gi}", dtype, [d_head, "kv_len"], "input")
        score = _tensor(g, f"score{gi}", dtype, ["batch", "kv_len"], "activation")
        _node(g, f"attn_score{gi}", "MatMul", [q, k_cache], [score],
              {"row_fold": hg})

        probs = _tensor(g, f"probs{gi}", dtype, ["batch", "kv_len"], "activation")
        _node(g, f"attn_softmax{gi}", "Softmax", [score], [probs])

        v_cache = _tensor(g, f"v_cache{gi}", dtype, ["kv_len", d_head], "input")
        ctx = _tensor(g, f"ctx{gi}", dtype, ["batch", d_head], "activation")
        _node(g, f"attn_ctx{gi}", "MatMul", [probs, v_cache], [ctx])

        wo = _tensor(g, f"w_o{gi}", dtype, [hg * d_head, d_model], "weight")
        og = _tensor(g, f"attn_o{gi}", dtype, ["batch", d_model], "activation")
        _node(g, f"out_proj{gi}", "Gemm", [ctx, wo], [og], {"row_unfold": hg})
        group_outs.append(og)

    attn = group_outs[0]
    for gi in range(1, kv_heads):
        s = _tensor(g, f"attn_sum{gi}", dtype, ["batch", d_model], "activation")
        _node(g, f"attn_add{gi}", "Add", [attn, group_outs[gi]], [s])
        attn = s

    r1 = _tensor(g, "resid1", dtype, ["batch", d_model], "activation")
    _node(g, "resid_add1", "Add", [attn, x], [r1])
    xn2 = _tensor(g, "ln2_out", dtype, ["batch", d_model], "activation")
    _node(g, "ln2", "LayerNorm", [r1], [xn2])

    d_ffn = ffn_mult * d_model
    w1 = _tensor(g, "w_ffn1", dtype, [d_model, d_ffn], "weight")
    f1 = _tensor(g, "ffn1_out", dtype, ["batch", d_ffn], "activation")
    _node(g, "ffn1", "Gemm", [xn2, w1], [f1])
    f2 = _tensor(g, "ffn_act_out", dtype, ["batch", d_ffn], "activation")
    _node(g, "ffn_act", "GELU", [f1], [f2])
    w2 = _tensor(g, "w_ffn2", dtype, [d_ffn, d_model], "weight")
    f3 = _tensor(g, "ffn2_out", dtype, ["batch", d_model], "activation")
    _node(g, "ffn2", "Gemm", [f2, w2], [f3])
    y = _tensor(g, "y", dtype, ["batch", d_model], "output")
    _node(g, "resid_add2", "Add", [f3, r1], [y])
    return g


def attention_node_ids(g: ModelGraph) -> list[str]:
    """Score/softmax/context nodes: the attention phase for reporting."""
    return [n.id for n in g.nodes if n.id.startswith("attn_score")
            or n.id.startswith("attn_softmax") or n.id.startswith("attn_ctx")]
