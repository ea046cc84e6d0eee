import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from mvsl.encoders import (
    EncoderConfig, build_encoders, encode_image_frozen, encode_text_frozen, tokenize,
)
from mvsl.errors import ConfigurationError, InputError, TokenizationError


def _images(config, B, seed=0):
    rng = np.random.default_rng(seed)
    s = config.image_side
    return torch.from_numpy(rng.uniform(0, 1, (B, config.channels, s, s)))


class TestConfig:
    def test_default_token_count(self, default_config):
        assert default_config.n_patches == 16
        assert default_config.n_tokens == 17

    def test_embed_dim_must_be_smaller(self):
        with pytest.raises(ConfigurationError):
            EncoderConfig(block_dim=64, embed_dim=64)

    @pytest.mark.parametrize("kw", [
        {"image_side": 15}, {"n_heads": 5}, {"n_blocks": 0}, {"vocab_size": 1},
    ])
    def test_invalid(self, kw):
        with pytest.raises(ConfigurationError):
            EncoderConfig(**kw)

    def test_dict_round_trip(self, default_config):
        assert EncoderConfig.from_dict(default_config.to_dict()) == default_config

    def test_unknown_key_rejected(self, default_config):
        with pytest.raises(ConfigurationError, match="bogus"):
            EncoderConfig.from_dict({**default_config.to_dict(), "bogus": 1})

    def test_fingerprint_tracks_fields(self, default_config):
        assert default_config.fingerprint() == EncoderConfig().fingerprint()
        assert default_config.fingerprint() != EncoderConfig(seed=1).fingerprint()


class TestWeights:
    def test_same_config_same_checksum(self, default_config):
        v1, t1 = build_encoders(default_config)
        v2, t2 = build_encoders(default_config)
        assert v1.checksum() == v2.checksum()
        assert t1.checksum() == t2.checksum()

    def test_seed_changes_weights(self):
        a, _ = build_encoders(EncoderConfig(seed=0))
        b, _ = build_encoders(EncoderConfig(seed=1))
        assert a.checksum() != b.checksum()

    def test_all_frozen(self, encoders):
        for enc in encoders:
            assert not any(p.requires_grad for p in enc.parameters())

    def test_finite(self, encoders):
        for enc in encoders:
            assert all(torch.isfinite(p).all() for p in enc.parameters())


class TestTokenize:
    def test_init_phrase_has_four_words(self, default_config):
        assert len(tokenize("a photo of a", default_config)) == 4

    def test_repeated_word_same_id(self, default_config):
        ids = tokenize("a photo of a", default_config).ids
        assert ids[0] == ids[3]
        assert len(set(ids)) == 3

    def test_case_insensitive(self, default_config):
        assert tokenize("Glioma Tumor", default_config) == tokenize("glioma tumor", default_config)

    def test_punctuation_splits(self, default_config):
        assert tokenize("glioma, tumor!", default_config) == tokenize("glioma tumor", default_config)

    @pytest.mark.parametrize("text", ["", "   ", "!!", "__"])
    def test_empty_rejected(self, default_config, text):
        with pytest.raises(TokenizationError):
            tokenize(text, default_config)

    def test_over_length_rejected(self):
        cfg = EncoderConfig(max_text_len=3)
        with pytest.raises(InputError):
            tokenize("one two three four", cfg)

    @settings(max_examples=200, deadline=None)
    @given(st.text(min_size=1, max_size=60))
    def test_ids_in_range_and_stable(self, text):
        cfg = EncoderConfig(max_text_len=64)
        try:
            seq = tokenize(text, cfg)
        except TokenizationError:
            return
        assert seq == tokenize(text, cfg)
        assert len(seq) >= 1
        assert all(1 <= i < cfg.vocab_size for i in seq.ids)


class TestVision:
    def test_shapes(self, encoders, default_config):
        vision, _ = encoders
        act = encode_image_frozen(vision, _images(default_config, 3))
        assert len(act.per_block) == default_config.n_blocks
        for f in act.per_block:
            assert f.shape == (3, 17, 64)
            assert torch.isfinite(f).all()
        assert act.cls_out.shape == (3, 32)

    def test_deterministic(self, encoders, default_config):
        vision, _ = encoders
        x = _images(default_config, 2)
        a, b = encode_image_frozen(vision, x), encode_image_frozen(vision, x)
        assert torch.equal(a.cls_out, b.cls_out)
        assert all(torch.equal(p, q) for p, q in zip(a.per_block, b.per_block))

    def test_empty_batch(self, encoders, default_config):
        vision, _ = encoders
        act = encode_image_frozen(vision, _images(default_config, 0))
        assert act.cls_out.shape == (0, 32)
        assert all(f.shape == (0, 17, 64) for f in act.per_block)

    def test_wrong_shape_rejected(self, encoders):
        vision, _ = encoders
        with pytest.raises(InputError):
            encode_image_frozen(vision, torch.zeros(1, 1, 8, 8, dtype=torch.float64))

    def test_nan_rejected(self, encoders, default_config):
        vision, _ = encoders
        x = _images(default_config, 1)
        x[0, 0, 0, 0] = float("nan")
        with pytest.raises(InputError):
            encode_image_frozen(vision, x)

    def test_does_not_mutate_weights(self, default_config):
        vision, _ = build_encoders(default_config)
        before = vision.checksum()
        encode_image_frozen(vision, _images(default_config, 2))
        assert vision.checksum() == before


class TestText:
    def test_shape_single_class(self, encoders, default_config):
        _, text = encoders
        out = encode_text_frozen(text, [tokenize("glioma", default_config)])
        assert out.shape == (1, 32)

    def test_identical_sequences_identical_rows(self, encoders, default_config):
        _, text = encoders
        s = tokenize("normal brain", default_config)
        out = encode_text_frozen(text, [s, s])
        assert torch.equal(out[0], out[1])

    def test_permutation_purity(self, encoders, default_config):
        _, text = encoders
        seqs = [tokenize(t, default_config) for t in
                ("glioma tumor", "meningioma", "normal brain tissue", "pituitary tumor")]
        out = encode_text_frozen(text, seqs)
        perm = [2, 0, 3, 1]
        out_p = encode_text_frozen(text, [seqs[i] for i in perm])
        np.testing.assert_allclose(out_p.numpy(), out[perm].numpy(), rtol=0, atol=1e-12)

    def test_padding_does_not_leak(self, encoders, default_config):
        _, text = encoders
        short = tokenize("glioma", default_config)
        long = tokenize("a much longer description of a tumor", default_config)
        alone = encode_text_frozen(text, [short])
        mixed = encode_text_frozen(text, [short, long])
        np.testing.assert_allclose(mixed[0].numpy(), alone[0].numpy(), rtol=0, atol=1e-12)

    def test_empty(self, encoders):
        _, text = encoders
        assert encode_text_frozen(text, []).shape == (0, 32)
