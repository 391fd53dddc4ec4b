import pytest

from npusim.errors import ConfigError
from npusim.graph import DTYPE_BYTES, bind_shapes, validate_graph
from npusim.models import attention_node_ids, build_synthetic_model


class TestGemm:
    def test_single_node(self):
        g = build_synthetic_model("gemm", m=64, k=64, n=64)
        assert len(g.nodes) == 1
        assert validate_graph(g) == []


class TestMlp:
    def test_two_layer_structure(self):
        g = build_synthetic_model("mlp", layers=2, width=128)
        assert [n.op_type for n in g.nodes] == ["Gemm", "GELU", "Gemm"]

    def test_bad_params(self):
        with pytest.raises(ConfigError):
            build_synthetic_model("mlp", layers=0, width=8)


class TestConvBlock:
    def test_shapes_chain(self):
        g = build_synthetic_model("conv_block", in_ch=3, out_ch=16, hw=16,
                                  kernel=3, layers=2)
        b = bind_shapes(g, {"batch": 2})
        assert b.tensors["c0"].shape == [2, 16, 16, 16]
        assert b.tensors["r1"].shape == [2, 16, 16, 16]
        assert validate_graph(g) == []


class TestTransformerBlock:
    def test_kv_weight_ratio(self):
        # kv_heads = heads vs heads/4: K/V projection weight bytes 4:1.
        def kv_bytes(kv_heads):
            g = build_synthetic_model("transformer_block", d_model=512,
                                      heads=8, kv_heads=kv_heads)
            total = 0
            for t in g.tensors.values():
                if t.name.startswith(("w_k", "w_v")):
                    total += t.num_elements() * DTYPE_BYTES[t.dtype]
            return total
        assert kv_bytes(8) == 4 * kv_bytes(2)

    def test_kv_cache_bytes_scale_with_groups(self):
        def cache_elems(kv_heads, kv_len):
            g = build_synthetic_model("transformer_block", d_model=256,
                                      heads=8, kv_heads=kv_heads)
            b = bind_shapes(g, {"batch": 1, "kv_len": kv_len})
            return sum(t.num_elements() for t in b.tensors.values()
                       if t.name.startswith(("k_cache", "v_cache")))
        assert cache_elems(8, 128) == 4 * cache_elems(2, 128)
        # Cache traffic grows linearly with the bound kv_len.
        assert cache_elems(8, 256) == 2 * cache_elems(8, 128)

    def test_indivisible_heads_rejected(self):
        with pytest.raises(ConfigError):
            build_synthetic_model("transformer_block", d_model=64, heads=8,
                                  kv_heads=3)

    def test_valid_and_bindable(self):
        g = build_synthetic_model("transformer_block", d_model=128, heads=8,
                                  kv_heads=2)
        assert validate_graph(g) == []
        b = bind_shapes(g, {"batch": 4, "kv_len": 100})
        assert b.tensors["score0"].shape == [16, 100]  # batch * heads/kv_heads
        assert b.tensors["y"].shape == [4, 128]

    def test_attention_node_tagging(self):
        g = build_synthetic_model("transformer_block", d_model=64, heads=4,
                                  kv_heads=4)
        ids = attention_node_ids(g)
        assert len(ids) == 3 * 4  # score+softmax+ctx per group
        assert all(i.startswith("attn_") for i in ids)


def test_unknown_kind():
    with pytest.raises(ConfigError):
        build_synthetic_model("rnn")
