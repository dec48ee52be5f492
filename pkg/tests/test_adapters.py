from __future__ import annotations

import numpy as np
import pytest

from elrea import adapters, model

from conftest import make_seq, random_adapter, tiny_config


def test_init_shapes_and_zero_delta():
    cfg = tiny_config()
    ad = adapters.init_lora(cfg, r=2, seed=1)
    shapes = model.linear_shapes(cfg)
    assert ad.names() == sorted(shapes)
    for name, (d_out, d_in) in shapes.items():
        A, B = ad.layers[name]
        assert A.shape == (d_in, 2)
        assert B.shape == (d_out, 2)
        assert np.array_equal(B, np.zeros_like(B))
    assert ad.alpha == 8.0
    assert ad.scale == 4.0


def test_init_rank_bounds():
    cfg = tiny_config(d_model=16)
    with pytest.raises(ValueError):
        adapters.init_lora(cfg, r=17, seed=1)
    with pytest.raises(ValueError):
        adapters.init_lora(cfg, r=0, seed=1)
    adapters.init_lora(cfg, r=16, seed=1)  # boundary ok


def test_rank_64_constructible():
    cfg = tiny_config(d_model=64, n_heads=4, d_ff=128)
    ad = adapters.init_lora(cfg, r=64, seed=1)
    assert ad.alpha == 256.0


def test_flatten_round_trip_and_length():
    cfg = tiny_config()
    ad = random_adapter(cfg, r=3, seed=2)
    vec = adapters.flatten(ad)
    expected = sum(
        3 * (d_out + d_in) for d_out, d_in in model.linear_shapes(cfg).values()
    )
    assert vec.shape == (expected,)
    back = adapters.unflatten(vec, ad)
    for n in ad.names():
        assert np.array_equal(back.layers[n][0], ad.layers[n][0])
        assert np.array_equal(back.layers[n][1], ad.layers[n][1])
    with pytest.raises(ValueError):
        adapters.unflatten(vec[:-1], ad)


def test_flatten_injective():
    cfg = tiny_config()
    a = random_adapter(cfg, r=2, seed=3)
    b = random_adapter(cfg, r=2, seed=4)
    assert not np.array_equal(adapters.flatten(a), adapters.flatten(b))


def test_additivity_vs_dense_delta(vocab):
    # adapted forward equals a backbone whose weights absorbed scale * B A^T
    cfg = tiny_config(n_layers=1)
    params = model.init_backbone(cfg, seed=5)
    ad = random_adapter(cfg, r=2, seed=6)
    seq = make_seq(vocab, "add 1 9", "1 + 9 = 10")
    merged = params.copy()
    for name, (A, B) in ad.layers.items():
        merged.arrays[name + ".w"] = merged.arrays[name + ".w"] + ad.scale * (B @ A.T)
    out_adapter = model.forward(params, ad, seq)
    out_dense = model.forward(merged, None, seq)
    assert np.allclose(out_adapter, out_dense, atol=1e-9, rtol=0)


def test_merge_identity_cases():
    cfg = tiny_config()
    a = random_adapter(cfg, r=2, seed=7)
    b = random_adapter(cfg, r=2, seed=8)
    first = adapters.merge_weighted([a, b], [1.0, 0.0])
    for n in a.names():
        assert np.allclose(first.layers[n][0], a.layers[n][0], atol=1e-15)
        assert np.allclose(first.layers[n][1], a.layers[n][1], atol=1e-15)
    same = adapters.merge_weighted([a, a.copy()], [2.0, 3.0])
    for n in a.names():
        assert np.allclose(same.layers[n][0], a.layers[n][0], atol=1e-12)


def test_merge_linear_in_members():
    cfg = tiny_config(n_layers=1)
    a = random_adapter(cfg, r=2, seed=9)
    b = random_adapter(cfg, r=2, seed=10)
    m = adapters.merge_weighted([a, b], [0.25, 0.75])
    for n in a.names():
        want = 0.25 * a.layers[n][0] + 0.75 * b.layers[n][0]
        assert np.allclose(m.layers[n][0], want, atol=1e-12)


def test_merged_product_is_not_sum_of_products():
    # (sum lam B)(sum lam A)^T differs from sum lam B A^T: 2x2 construction
    A1 = np.array([[1.0], [0.0]])
    B1 = np.array([[0.0], [1.0]])
    A2 = np.array([[0.0], [1.0]])
    B2 = np.array([[1.0], [0.0]])
    lam = [0.5, 0.5]
    merged = (lam[0] * B1 + lam[1] * B2) @ (lam[0] * A1 + lam[1] * A2).T
    routed = lam[0] * B1 @ A1.T + lam[1] * B2 @ A2.T
    assert np.abs(merged - routed).max() > 0.2


def test_merge_errors():
    cfg = tiny_config()
    a = random_adapter(cfg, r=2, seed=11)
    b = random_adapter(cfg, r=3, seed=12)
    with pytest.raises(ValueError):
        adapters.merge_weighted([a, b], [0.5, 0.5])
    with pytest.raises(ValueError):
        adapters.merge_weighted([a, a], [0.0, 0.0])
    with pytest.raises(ValueError):
        adapters.merge_weighted([a, a], [1.0, -0.5])
    with pytest.raises(ValueError):
        adapters.merge_weighted([a, a], [1.0])


def test_stack_bank_validates():
    cfg = tiny_config()
    a = random_adapter(cfg, r=2, seed=13)
    b = random_adapter(cfg, r=3, seed=14)
    with pytest.raises(ValueError):
        adapters.stack_bank([a, b])
    bank = adapters.stack_bank([a, a.copy()])
    assert bank.size == 2


def test_checkpoint_round_trip_bit_exact(tmp_path):
    cfg = tiny_config()
    ad = random_adapter(cfg, r=2, seed=15)
    p = str(tmp_path / "a.ckpt")
    adapters.save_adapter(p, ad, meta={"note": 1})
    back, meta = adapters.load_adapter(p)
    assert meta["note"] == 1
    assert back.r == ad.r and back.alpha == ad.alpha
    assert np.array_equal(adapters.flatten(back), adapters.flatten(ad))
    # byte-identical rewrite
    data1 = open(p, "rb").read()
    adapters.save_adapter(p, ad, meta={"note": 1})
    assert open(p, "rb").read() == data1


def test_trainable_fraction_on_large_shape_table():
    # multi-query-attention decoder: 18 blocks, d_model 2048, kv heads share
    # one 256-wide projection, feed-forward 16384, tied output head
    d, kv, ff, layers, vocab_size = 2048, 256, 16384, 18, 256000
    shapes = {}
    for i in range(layers):
        shapes[f"L{i}.q"] = (d, d)
        shapes[f"L{i}.k"] = (kv, d)
        shapes[f"L{i}.v"] = (kv, d)
        shapes[f"L{i}.o"] = (d, d)
        shapes[f"L{i}.gate"] = (ff, d)
        shapes[f"L{i}.up"] = (ff, d)
        shapes[f"L{i}.down"] = (d, ff)
    backbone_total = vocab_size * d + sum(
        o * i for o, i in shapes.values()
    ) + layers * 2 * d + d
    adapter_total = adapters.lora_param_count(shapes, r=8)
    frac = adapter_total / backbone_total
    assert abs(frac - 0.0039) < 2e-4
