from __future__ import annotations

import numpy as np
import pytest

from elrea import adapters, corpus, model

from conftest import make_seq, random_adapter, tiny_config


def rel_err(a, b):
    # relative where magnitudes are non-negligible, absolute-scaled below
    return abs(a - b) / max(abs(a), abs(b), 1e-3)


def fd_check(loss_fn, flat, analytic, rng, n_coords=20, h=1e-5):
    coords = rng.choice(flat.size, size=min(n_coords, flat.size), replace=False)
    worst = 0.0
    for c in coords:
        plus = flat.copy()
        plus[c] += h
        minus = flat.copy()
        minus[c] -= h
        fd = (loss_fn(plus) - loss_fn(minus)) / (2 * h)
        worst = max(worst, rel_err(analytic[c], fd))
    return worst


# --- init ---------------------------------------------------------------


def test_init_deterministic():
    cfg = tiny_config()
    a = model.init_backbone(cfg, seed=1)
    b = model.init_backbone(cfg, seed=1)
    assert a.names() == b.names()
    for n in a.names():
        assert np.array_equal(a.arrays[n], b.arrays[n])
    c = model.init_backbone(cfg, seed=2)
    assert not np.array_equal(a.arrays["tok_emb"], c.arrays["tok_emb"])


def test_head_dim_arithmetic():
    assert model.LmConfig(d_model=64, n_heads=4).head_dim == 16


def test_bad_head_split_rejected():
    with pytest.raises(ValueError):
        model.LmConfig(d_model=63, n_heads=4)


def test_flatten_round_trip():
    cfg = tiny_config()
    params = model.init_backbone(cfg, seed=3)
    flat = params.flatten()
    back = params.with_flat(flat)
    for n in params.names():
        assert np.array_equal(params.arrays[n], back.arrays[n])


# --- forward ------------------------------------------------------------


def test_fresh_adapter_is_identity(vocab):
    cfg = tiny_config()
    params = model.init_backbone(cfg, seed=1)
    seq = make_seq(vocab, "add 1 2", "1 + 2 = 3")
    base = model.forward(params, None, seq)
    fresh = adapters.init_lora(cfg, r=2, seed=5)
    assert np.array_equal(model.forward(params, fresh, seq), base)


def test_causality(vocab):
    cfg = tiny_config()
    params = model.init_backbone(cfg, seed=1)
    seq = make_seq(vocab, "sort abc", "abc sorted = abc")
    logits = model.forward(params, None, seq)
    tokens2 = seq.tokens.copy()
    tokens2[5] = corpus.Vocab().encode_char("z")
    logits2 = model.forward(params, None, tokens2)
    assert np.array_equal(logits[:5], logits2[:5])
    assert not np.allclose(logits[5:], logits2[5:])


def test_over_length_rejected(vocab):
    cfg = tiny_config(max_len=8)
    params = model.init_backbone(cfg, seed=1)
    with pytest.raises(ValueError):
        model.forward(params, None, np.arange(9) % 4)


def test_forward_deterministic_and_dropout_seeded(vocab):
    cfg = tiny_config()
    params = model.init_backbone(cfg, seed=1)
    ad = random_adapter(cfg, r=2, seed=2, dropout_p=0.5)
    seq = make_seq(vocab, "copy ab", "ab copied = ab")
    a = model.forward(params, ad, seq)
    b = model.forward(params, ad, seq)
    assert np.array_equal(a, b)
    d1, _ = model._forward(params, seq.tokens, adapter=ad, dropout_p=0.5,
                           dropout_rng=np.random.default_rng(9))
    d2, _ = model._forward(params, seq.tokens, adapter=ad, dropout_p=0.5,
                           dropout_rng=np.random.default_rng(9))
    d3, _ = model._forward(params, seq.tokens, adapter=ad, dropout_p=0.5,
                           dropout_rng=np.random.default_rng(10))
    assert np.array_equal(d1, d2)
    assert not np.array_equal(d1, d3)
    assert not np.array_equal(d1, a)


def test_bank_matches_single_forwards(vocab):
    cfg = tiny_config()
    params = model.init_backbone(cfg, seed=1)
    seq = make_seq(vocab, "reverse ab", "ab reversed = ba")
    ads = [random_adapter(cfg, r=2, seed=s) for s in (10, 11, 12)]
    bank = adapters.stack_bank(ads)
    stacked = model.forward_bank(params, bank, seq.tokens)
    assert stacked.shape == (3, len(seq), cfg.vocab_size)
    for k, ad in enumerate(ads):
        single = model.forward(params, ad, seq)
        assert np.allclose(stacked[k], single, atol=1e-12, rtol=0)


# --- loss ---------------------------------------------------------------


def test_loss_uniform_logits():
    tokens = np.array([1, 5, 6, 7], dtype=np.int64)
    logits = np.zeros((4, 4))
    mask = np.array([False, False, True, False])
    seq = corpus.TokenSequence("x", tokens % 4, np.zeros(4, dtype=np.uint8))
    loss = model.ntp_loss(logits, seq, mask)
    assert loss == pytest.approx(np.log(4), abs=1e-12)
    mask2 = np.array([False, False, True, True])
    assert model.ntp_loss(logits, seq, mask2) == pytest.approx(2 * np.log(4), abs=1e-12)


def test_loss_one_hot_limit():
    tokens = np.array([0, 2], dtype=np.int64)
    logits = np.zeros((2, 5))
    logits[0, 2] = 1e9
    mask = np.array([False, True])
    assert model.ntp_loss(logits, tokens, mask) == pytest.approx(0.0, abs=1e-9)


def test_loss_additive_over_masked_positions(vocab):
    cfg = tiny_config()
    params = model.init_backbone(cfg, seed=4)
    seq = make_seq(vocab, "add 3 4", "3 + 4 = 7")
    logits = model.forward(params, None, seq)
    n = len(seq)
    full = np.zeros(n, dtype=bool)
    full[2] = full[5] = True
    m1 = np.zeros(n, dtype=bool)
    m1[2] = True
    m2 = np.zeros(n, dtype=bool)
    m2[5] = True
    total = model.ntp_loss(logits, seq, full)
    assert total == pytest.approx(
        model.ntp_loss(logits, seq, m1) + model.ntp_loss(logits, seq, m2), rel=1e-12
    )


def test_loss_mask_errors(vocab):
    cfg = tiny_config()
    params = model.init_backbone(cfg, seed=4)
    seq = make_seq(vocab, "add 1 1", "1 + 1 = 2")
    logits = model.forward(params, None, seq)
    with pytest.raises(ValueError):
        model.ntp_loss(logits, seq, np.zeros(len(seq), dtype=bool))
    bad = np.zeros(len(seq), dtype=bool)
    bad[0] = True
    with pytest.raises(ValueError):
        model.ntp_loss(logits, seq, bad)


# --- masks --------------------------------------------------------------


def test_role_masks(vocab):
    seq = make_seq(vocab, "ab", "cd")
    rm = model.response_mask(seq)
    im = model.instruction_mask(seq)
    # layout: BOS a b SEP c d EOS
    assert list(rm) == [False] * 4 + [True] * 3
    assert list(im) == [False, True, True, True, False, False, False]
    assert not (rm & im).any()


def test_instruction_mask_requires_positions(vocab):
    seq = make_seq(vocab, "ab", "cd")
    prompt_only = corpus.TokenSequence(
        "x", seq.tokens[:1], seq.roles[:1].copy()
    )
    with pytest.raises(ValueError):
        model.instruction_mask(prompt_only)


# --- gradients ----------------------------------------------------------


def test_adapter_grad_dimension(vocab):
    cfg = tiny_config()
    params = model.init_backbone(cfg, seed=1)
    ad = adapters.init_lora(cfg, r=2, seed=2)
    seq = make_seq(vocab, "sort ba", "ba sorted = ab")
    g = model.grad(params, ad, seq, model.response_mask(seq))
    assert g.shape == (ad.n_params,)


def test_grad_zero_wrt_A_when_B_zero(vocab):
    cfg = tiny_config()
    params = model.init_backbone(cfg, seed=1)
    ad = adapters.init_lora(cfg, r=2, seed=2)  # B = 0
    seq = make_seq(vocab, "sort ba", "ba sorted = ab")
    loss, g = model.loss_and_grad(params, ad, seq, model.response_mask(seq))
    back = adapters.unflatten(g, ad)
    for name in back.names():
        dA, dB = back.layers[name]
        assert np.array_equal(dA, np.zeros_like(dA))
        assert not np.array_equal(dB, np.zeros_like(dB))


def test_adapter_grad_finite_difference(vocab):
    cfg = tiny_config()
    params = model.init_backbone(cfg, seed=1)
    seq = make_seq(vocab, "add 2 3", "2 + 3 = 5")
    mask = model.response_mask(seq)
    for seed in range(3):
        ad = random_adapter(cfg, r=2, seed=seed)
        flat0 = adapters.flatten(ad)
        _, analytic = model.loss_and_grad(params, ad, seq, mask)

        def loss_fn(vec):
            logits = model.forward(params, adapters.unflatten(vec, ad), seq)
            return model.ntp_loss(logits, seq, mask)

        worst = fd_check(loss_fn, flat0, analytic, np.random.default_rng(seed))
        assert worst <= 1e-6, f"seed {seed}: relative error {worst}"


def test_grad_batch_matches_per_sequence(vocab):
    # the padded batch kernel must agree with one grad() call per sequence,
    # mixed lengths included
    cfg = tiny_config()
    params = model.init_backbone(cfg, seed=3)
    ad = random_adapter(cfg, r=2, seed=9)
    seqs = [
        make_seq(vocab, "add 2 3", "2 + 3 = 5", seq_id="g-0"),
        make_seq(vocab, "reverse abcdef", "abcdef reversed = fedcba", seq_id="g-1"),
        make_seq(vocab, "copy ha", "ha copied = ha", seq_id="g-2"),
    ]
    masks = [model.instruction_mask(s) for s in seqs]
    batch = model.grad_batch(params, ad, [s.tokens for s in seqs], masks)
    assert batch.shape == (3, ad.n_params)
    for i, (s, m) in enumerate(zip(seqs, masks)):
        single = model.grad(params, ad, s, m)
        assert np.abs(batch[i] - single).max() <= 1e-10


def test_grad_batch_input_errors(vocab):
    cfg = tiny_config()
    params = model.init_backbone(cfg, seed=3)
    ad = random_adapter(cfg, r=2, seed=9)
    seq = make_seq(vocab, "add 1 1", "1 + 1 = 2")
    assert model.grad_batch(params, ad, [], []).shape == (0, ad.n_params)
    with pytest.raises(ValueError, match="no left context"):
        bad = np.ones(seq.tokens.size, dtype=bool)
        model.grad_batch(params, ad, [seq.tokens], [bad])
    with pytest.raises(ValueError, match="selects no positions"):
        none = np.zeros(seq.tokens.size, dtype=bool)
        model.grad_batch(params, ad, [seq.tokens], [none])
    with pytest.raises(ValueError, match="lengths disagree"):
        model.grad_batch(params, ad, [seq.tokens], [np.ones(3, dtype=bool)])


def test_backbone_grad_finite_difference(vocab):
    cfg = tiny_config(n_layers=1)
    params = model.init_backbone(cfg, seed=6)
    seq = make_seq(vocab, "copy ha", "ha copied = ha")
    mask = model.response_mask(seq)
    _, analytic = model.loss_and_grad(params, None, seq, mask, wrt=model.WRT_BACKBONE)
    flat0 = params.flatten()
    assert analytic.shape == flat0.shape

    def loss_fn(vec):
        logits = model.forward(params.with_flat(vec), None, seq)
        return model.ntp_loss(logits, seq, mask)

    worst = fd_check(loss_fn, flat0, analytic, np.random.default_rng(0), n_coords=30)
    assert worst <= 1e-6, f"relative error {worst}"


def test_all_selector_concatenates(vocab):
    cfg = tiny_config(n_layers=1)
    params = model.init_backbone(cfg, seed=6)
    ad = random_adapter(cfg, r=2, seed=3)
    seq = make_seq(vocab, "add 4 4", "4 + 4 = 8")
    mask = model.response_mask(seq)
    _, g_all = model.loss_and_grad(params, ad, seq, mask, wrt=model.WRT_ALL)
    _, g_bb = model.loss_and_grad(params, ad, seq, mask, wrt=model.WRT_BACKBONE)
    _, g_ad = model.loss_and_grad(params, ad, seq, mask, wrt=model.WRT_ADAPTER)
    assert np.array_equal(g_all, np.concatenate([g_bb, g_ad]))


def test_unknown_selector_rejected(vocab):
    cfg = tiny_config()
    params = model.init_backbone(cfg, seed=1)
    ad = random_adapter(cfg, r=2, seed=2)
    seq = make_seq(vocab, "add 1 2", "1 + 2 = 3")
    with pytest.raises(ValueError):
        model.loss_and_grad(params, ad, seq, model.response_mask(seq), wrt="everything")


def test_dropout_grad_finite_difference(vocab):
    # with a replayable dropout stream the loss is a fixed function of params
    cfg = tiny_config(n_layers=1)
    params = model.init_backbone(cfg, seed=6)
    ad = random_adapter(cfg, r=2, seed=4, dropout_p=0.3)
    seq = make_seq(vocab, "sort cb", "cb sorted = bc")
    mask = model.response_mask(seq)
    _, analytic = model.loss_and_grad(
        params, ad, seq, mask, dropout_p=0.3, dropout_rng=np.random.default_rng(77)
    )
    flat0 = adapters.flatten(ad)

    def loss_fn(vec):
        logits, _ = model._forward(
            params, seq.tokens, adapter=adapters.unflatten(vec, ad),
            dropout_p=0.3, dropout_rng=np.random.default_rng(77),
        )
        return model.ntp_loss(logits, seq, mask)

    worst = fd_check(loss_fn, flat0, analytic, np.random.default_rng(1))
    assert worst <= 1e-6, f"relative error {worst}"


def test_mole_gate_grad_finite_difference(vocab):
    cfg = tiny_config(n_layers=1)
    params = model.init_backbone(cfg, seed=6)
    ads = [random_adapter(cfg, r=2, seed=s) for s in (1, 2, 3)]
    seq = make_seq(vocab, "add 5 2", "5 + 2 = 7")
    mask = model.response_mask(seq)
    shapes = model.linear_shapes(cfg)
    rng = np.random.default_rng(8)
    gates = {n: 0.3 * rng.standard_normal((3, shapes[n][1])) for n in shapes}
    mix = model.GatedMixture(
        a_stack={n: np.stack([a.layers[n][0] for a in ads]) for n in shapes},
        b_stack={n: np.stack([a.layers[n][1] for a in ads]) for n in shapes},
        gates=gates,
        scale=ads[0].scale,
    )
    _, gg = model.mole_loss_and_gate_grad(params, mix, seq, mask)
    names = sorted(gates)
    analytic = np.concatenate([gg[n].ravel() for n in names])
    flat0 = np.concatenate([gates[n].ravel() for n in names])

    def loss_fn(vec):
        g2, off = {}, 0
        for n in names:
            size = gates[n].size
            g2[n] = vec[off : off + size].reshape(gates[n].shape)
            off += size
        mix2 = model.GatedMixture(mix.a_stack, mix.b_stack, g2, mix.scale)
        return model.ntp_loss(model.mole_forward(params, mix2, seq), seq, mask)

    worst = fd_check(loss_fn, flat0, analytic, np.random.default_rng(2))
    assert worst <= 1e-6, f"relative error {worst}"
