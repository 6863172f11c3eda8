import itertools

import numpy as np
import pytest

from attnlink.errors import InputError
from attnlink.model import (
    BOS_ID,
    ModelConfig,
    count_params,
    decode,
    encode,
    forward,
    init_params,
    positional_encoding,
    zero_links,
)

from oracles import closed_form_param_count, loop_transformer

PLACEMENTS = ["none", "encoder", "decoder", "both"]


def toy(**kw):
    base = dict(
        d=8, d_q=4, d_k=4, d_v=4, d_hidden=12, h=2, n_enc_layers=2, n_dec_layers=2,
        src_vocab_size=10, tgt_vocab_size=11, max_len=16, dropout=0.0,
    )
    base.update(kw)
    return ModelConfig(**base)


def sample_ids(rng, vocab, n):
    return rng.integers(4, vocab, size=n)


class TestConfig:
    def test_problems_enumerated(self):
        cfg = ModelConfig(d_q=6, d_k=8, h=4, link_placement="sideways", dropout=1.0, lam=float("nan"))
        msg = str(pytest.raises(InputError, cfg.validate).value)
        for fragment in ("d_q=6", "must equal d_k", "link_placement", "dropout", "lam"):
            assert fragment in msg

    def test_default_config(self):
        cfg = ModelConfig()
        assert (cfg.d, cfg.d_q, cfg.d_k, cfg.d_v, cfg.d_hidden, cfg.h) == (512, 128, 128, 128, 1024, 4)
        assert cfg.n_enc_layers == cfg.n_dec_layers == 6
        cfg.validate()


class TestInitParams:
    def test_deterministic(self):
        a, b = init_params(toy(), 3), init_params(toy(), 3)
        assert all(np.array_equal(a[k].data, b[k].data) for k in a.names())

    def test_seed_matters(self):
        assert not np.array_equal(init_params(toy(), 3)["enc.0.self.wq"].data, init_params(toy(), 4)["enc.0.self.wq"].data)

    def test_biases_and_gains(self):
        p = init_params(toy(), 0)
        assert np.all(p["enc.1.ffn.b1"].data == 0) and np.all(p["dec.0.norm3.gain"].data == 1)
        assert np.all(p["dec.1.norm2.bias"].data == 0) and np.all(p["out.b"].data == 0)

    def test_glorot_bounds(self):
        cfg = toy()
        p = init_params(cfg, 0)
        w = p["enc.0.ffn.w1"].data
        assert np.abs(w).max() <= np.sqrt(6 / (cfg.d + cfg.d_hidden))

    @pytest.mark.parametrize("placement", PLACEMENTS)
    def test_parameter_parity(self, placement):
        # adding links introduces no parameters
        cfg = toy(link_placement=placement, link_source="reprojected", lam=0.3)
        assert init_params(cfg, 0).count() == init_params(toy(link_placement="none"), 0).count()

    def test_count_matches_closed_form(self):
        cfg = ModelConfig(d=8, d_q=8, d_k=8, d_v=8, d_hidden=16, h=2, n_enc_layers=1, n_dec_layers=1,
                          src_vocab_size=10, tgt_vocab_size=10)
        expected = closed_form_param_count(8, 8, 8, 16, 1, 1, 10, 10)
        assert init_params(cfg, 0).count() == count_params(cfg) == expected


def test_positional_encoding():
    pe = positional_encoding(5, 6)
    np.testing.assert_array_equal(pe[0], [0, 1, 0, 1, 0, 1])
    np.testing.assert_allclose(pe[3, 2], np.sin(3 / 10000 ** (2 / 6)))
    np.testing.assert_allclose(pe[3, 3], np.cos(3 / 10000 ** (2 / 6)))


class TestEncode:
    def test_length_one_input(self):
        cfg = toy(link_placement="both")
        enc = encode([5], init_params(cfg, 0), cfg)
        for r in enc.records:
            assert np.array_equal(r.probs.data, np.ones((1, cfg.h, 1, 1)))

    def test_decoder_placement_leaves_encoder_untouched(self):
        params = init_params(toy(), 1)
        src = [4, 7, 5, 9]
        a = encode(src, params, toy(link_placement="decoder"))
        b = encode(src, params, toy(link_placement="none"))
        for ra, rb in zip(a.records, b.records):
            assert np.array_equal(ra.probs.data, rb.probs.data)
        assert np.array_equal(a.k.data, b.k.data)

    @pytest.mark.parametrize("placement,source", [("both", "cached"), ("encoder", "reprojected"), ("none", "cached")])
    def test_memory_matches_loop_oracle(self, placement, source):
        cfg = toy(link_placement=placement, link_source=source, lam=0.7)
        params = init_params(cfg, 2)
        src = [4, 8, 6, 5, 9]
        enc = encode(src, params, cfg)
        K, V, _ = loop_transformer({k: v.data for k, v in params}, cfg.to_dict(), src, [BOS_ID])
        np.testing.assert_allclose(enc.k.data[0].transpose(0, 2, 1), K, atol=1e-10)
        np.testing.assert_allclose(enc.v.data[0].transpose(0, 2, 1), V, atol=1e-10)

    def test_rejects_bad_ids(self):
        cfg = toy()
        params = init_params(cfg, 0)
        with pytest.raises(InputError):
            encode([4, cfg.src_vocab_size], params, cfg)
        with pytest.raises(InputError):
            encode([4] * (cfg.max_len + 1), params, cfg)


class TestForward:
    def setup_method(self):
        self.rng = np.random.default_rng(0)
        self.src = sample_ids(self.rng, 10, 4)
        self.tgt = np.concatenate([[BOS_ID], sample_ids(self.rng, 11, 4)])

    def test_eval_deterministic(self):
        cfg = toy(dropout=0.3)
        params = init_params(cfg, 0)
        a, _ = forward(self.src, self.tgt, params, cfg)
        b, _ = forward(self.src, self.tgt, params, cfg)
        assert np.array_equal(a.data, b.data)

    def test_train_mode_dropout_seeded(self):
        cfg = toy(dropout=0.3)
        params = init_params(cfg, 0)
        a, _ = forward(self.src, self.tgt, params, cfg, "train", np.random.default_rng(5))
        b, _ = forward(self.src, self.tgt, params, cfg, "train", np.random.default_rng(5))
        c, _ = forward(self.src, self.tgt, params, cfg, "eval")
        assert np.array_equal(a.data, b.data)
        assert not np.array_equal(a.data, c.data)

    def test_requires_bos(self):
        cfg = toy()
        with pytest.raises(InputError):
            forward(self.src, [5, 6], init_params(cfg, 0), cfg)

    @pytest.mark.parametrize("placement", ["encoder", "decoder", "both"])
    def test_lambda_zero_equals_vanilla(self, placement):
        params = init_params(toy(), 3)
        a, _ = forward(self.src, self.tgt, params, toy(link_placement=placement, lam=0.0))
        b, _ = forward(self.src, self.tgt, params, toy(link_placement="none"))
        assert np.max(np.abs(a.data - b.data)) <= 1e-12

    def test_zeroed_links_equal_vanilla(self):
        params = init_params(toy(), 3)
        a, _ = forward(self.src, self.tgt, params, toy(link_placement="both"), link_override=zero_links)
        b, _ = forward(self.src, self.tgt, params, toy(link_placement="none"))
        assert np.max(np.abs(a.data - b.data)) <= 1e-12

    def test_links_change_output(self):
        params = init_params(toy(), 3)
        a, _ = forward(self.src, self.tgt, params, toy(link_placement="both"))
        b, _ = forward(self.src, self.tgt, params, toy(link_placement="none"))
        assert np.max(np.abs(a.data - b.data)) > 1e-6

    @pytest.mark.parametrize(
        "placement,source,scale",
        [("both", "cached", True), ("both", "reprojected", True), ("decoder", "cached", False), ("none", "cached", True)],
    )
    def test_matches_loop_oracle(self, placement, source, scale):
        cfg = toy(link_placement=placement, link_source=source, scale_logits=scale, lam=1.0)
        params = init_params(cfg, 4)
        logits, _ = forward(self.src, self.tgt, params, cfg)
        _, _, ref = loop_transformer({k: v.data for k, v in params}, cfg.to_dict(), list(self.src), list(self.tgt))
        np.testing.assert_allclose(logits.data[0].T, ref, atol=1e-9)

    def test_causality(self):
        cfg = toy(link_placement="both")
        params = init_params(cfg, 5)
        base, _ = forward(self.src, self.tgt, params, cfg)
        for j in range(1, len(self.tgt)):
            tgt = self.tgt.copy()
            tgt[j] = 4 + (tgt[j] - 3) % 7
            out, _ = forward(self.src, tgt, params, cfg)
            assert np.array_equal(out.data[0, :j], base.data[0, :j])

    def test_encoder_placement_leaves_decoder_stack_untouched(self):
        # the decoder stack, fed the same memory, is unaffected by encoder links
        params = init_params(toy(), 6)
        enc = encode(self.src, params, toy(link_placement="encoder"))
        la, ra = decode(self.tgt, enc, params, toy(link_placement="encoder"))
        lb, rb = decode(self.tgt, enc, params, toy(link_placement="none"))
        assert np.array_equal(la.data, lb.data)
        for a, b in zip(ra, rb):
            assert np.array_equal(a.probs.data, b.probs.data)
            assert np.array_equal(a.logits.data, b.logits.data)

    def test_decoder_placement_leaves_encoder_untouched(self):
        params = init_params(toy(), 6)
        _, ra = forward(self.src, self.tgt, params, toy(link_placement="decoder"))
        _, rn = forward(self.src, self.tgt, params, toy(link_placement="none"))
        n_enc = toy().n_enc_layers
        for a, b in zip(ra[:n_enc], rn[:n_enc]):
            assert np.array_equal(a.probs.data, b.probs.data)
            assert np.array_equal(a.logits.data, b.logits.data)

    def test_padding_does_not_leak(self):
        cfg = toy(link_placement="both")
        params = init_params(cfg, 7)
        single, _ = forward(self.src, self.tgt, params, cfg)
        padded_src = np.array([list(self.src) + [0, 0], [4, 5, 6, 7, 8, 9]])
        padded_tgt = np.array([list(self.tgt), list(self.tgt)])
        batch, _ = forward(padded_src, padded_tgt, params, cfg)
        np.testing.assert_allclose(batch.data[0], single.data[0], atol=1e-12)


def test_records_rows_stochastic():
    cfg = toy(link_placement="both")
    params = init_params(cfg, 8)
    _, recs = forward([4, 5, 6], [BOS_ID, 7, 8, 9], params, cfg)
    kinds = [r.kind for r in recs]
    assert kinds == ["self", "self"] + list(itertools.chain(*[["self", "cross"]] * 2))
    for r in recs:
        np.testing.assert_allclose(r.probs.data.sum(axis=-1), 1.0, atol=1e-9)
