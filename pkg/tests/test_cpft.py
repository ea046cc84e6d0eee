import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from mvsl.cpft import (
    AdapterParams, AdapterStack, ImagePrompt, PromptContext, apply_adapter,
    encode_image_adapted, encode_text_adapted, encode_text_prompted, frozen_prefix,
    init_adapter, init_prompt_context,
)
from mvsl.encoders import DTYPE, encode_image_frozen, encode_text_frozen, tokenize
from mvsl.errors import ConfigurationError, InputError
from mvsl.training import central_differences, relative_error


def _images(config, B, seed=0):
    rng = np.random.default_rng(seed)
    s = config.image_side
    return torch.from_numpy(rng.uniform(0, 1, (B, config.channels, s, s)))


def _t(x):
    return torch.tensor(x, dtype=DTYPE)


class TestAdapterInit:
    def test_shapes_and_zero_up_projection(self, default_config):
        a = init_adapter(default_config)
        assert a.w1.shape == (64, 32)
        assert a.w2.shape == (32, 64)
        assert torch.count_nonzero(a.w2) == 0
        assert float(a.alpha) == 0.5
        assert not a.alpha.requires_grad

    def test_seeded(self, default_config):
        assert torch.equal(init_adapter(default_config, seed=4).w1,
                           init_adapter(default_config, seed=4).w1)
        assert not torch.equal(init_adapter(default_config, seed=4).w1,
                               init_adapter(default_config, seed=5).w1)

    def test_w1_scale(self, default_config):
        w1 = init_adapter(default_config).w1
        assert abs(float(w1.detach().var()) - 1 / 64) < 0.2 / 64

    @pytest.mark.parametrize("k", [0, 13])
    def test_block_out_of_range(self, default_config, k):
        with pytest.raises(ConfigurationError):
            init_adapter(default_config, block_index=k)

    def test_alpha_range(self, default_config):
        with pytest.raises(ConfigurationError):
            init_adapter(default_config, alpha=1.5)

    def test_learnable_alpha_flag(self, default_config):
        assert init_adapter(default_config, learnable_alpha=True).alpha.requires_grad

    def test_fresh_adapter_second_step_zero(self, default_config):
        a = init_adapter(default_config)
        f = torch.randn(3, 17, 64, dtype=DTYPE)
        h2 = torch.relu(torch.relu(f @ a.w1) @ a.w2)
        assert torch.count_nonzero(h2) == 0


class TestApplyAdapter:
    def test_hand_trace_1d(self):
        a = AdapterParams(1, _t([[1.0]]), _t([[-1.0]]), alpha=0.5)
        out, h1 = apply_adapter(_t([[2.0]]), a)
        assert h1.item() == 2.0
        assert out.item() == 1.0

    def test_alpha_one_is_identity(self):
        g = torch.Generator().manual_seed(0)
        a = AdapterParams(1, torch.randn(8, 3, generator=g, dtype=DTYPE),
                          torch.randn(3, 8, generator=g, dtype=DTYPE), alpha=1.0)
        f = torch.randn(2, 5, 8, generator=g, dtype=DTYPE)
        assert torch.equal(apply_adapter(f, a)[0], f)

    @settings(max_examples=50, deadline=None)
    @given(st.floats(0.0, 1.0), st.integers(0, 2 ** 31 - 1))
    def test_zero_up_projection_scales(self, alpha, seed):
        g = torch.Generator().manual_seed(seed)
        a = AdapterParams(1, torch.randn(8, 3, generator=g, dtype=DTYPE),
                          torch.zeros(3, 8, dtype=DTYPE), alpha=alpha)
        f = torch.randn(4, 8, generator=g, dtype=DTYPE)
        assert torch.equal(apply_adapter(f, a)[0], alpha * f)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2 ** 31 - 1))
    def test_relu_outputs_nonnegative(self, seed):
        g = torch.Generator().manual_seed(seed)
        a = AdapterParams(1, torch.randn(8, 3, generator=g, dtype=DTYPE),
                          torch.randn(3, 8, generator=g, dtype=DTYPE))
        f = torch.randn(4, 8, generator=g, dtype=DTYPE)
        h1 = torch.relu(f @ a.w1)
        assert (apply_adapter(f, a)[1] >= 0).all()
        assert (torch.relu(h1 @ a.w2) >= 0).all()

    def test_width_mismatch(self, default_config):
        with pytest.raises(InputError):
            apply_adapter(torch.zeros(1, 32, dtype=DTYPE), init_adapter(default_config))

    def test_bad_shapes(self):
        with pytest.raises(ConfigurationError):
            AdapterParams(1, torch.zeros(4, 2, dtype=DTYPE), torch.zeros(4, 2, dtype=DTYPE))


class TestStack:
    def test_duplicate_blocks_rejected(self, default_config):
        a = init_adapter(default_config, 5)
        with pytest.raises(ConfigurationError):
            AdapterStack([a, init_adapter(default_config, 5)])

    def test_build_sorts(self, default_config):
        s = AdapterStack.build(default_config, blocks=(11, 3))
        assert s.block_indices == [3, 11]

    def test_wrong_dims_rejected(self, default_config, small_config):
        stack = AdapterStack.build(small_config, blocks=(1,))
        with pytest.raises(InputError):
            stack.check(default_config)


class TestVisionAdapted:
    def test_alpha_one_matches_frozen_exactly(self, encoders, default_config):
        vision, _ = encoders
        x = _images(default_config, 3)
        stack = AdapterStack.build(default_config, alpha=1.0)
        out = encode_image_adapted(vision, stack, x)
        assert torch.equal(out.cls_adapted, encode_image_frozen(vision, x).cls_out)

    def test_alpha_one_random_weights_exact(self, encoders, default_config):
        vision, _ = encoders
        x = _images(default_config, 2, seed=1)
        stack = AdapterStack.build(default_config, blocks=(4, 11), alpha=1.0)
        with torch.no_grad():
            for a in stack:
                a.w2.normal_()
        out = encode_image_adapted(vision, stack, x)
        assert torch.equal(out.cls_adapted, encode_image_frozen(vision, x).cls_out)

    def test_zero_w2_scales_block_output(self, encoders, default_config):
        vision, _ = encoders
        x = _images(default_config, 2)
        act = encode_image_frozen(vision, x)
        stack = AdapterStack.build(default_config, blocks=(11,), alpha=0.5)
        a = stack.adapters[0]
        out, _ = apply_adapter(act.per_block[10], a)
        assert torch.equal(out, 0.5 * act.per_block[10])

    def test_patch_feature_shape(self, encoders, default_config):
        vision, _ = encoders
        out = encode_image_adapted(vision, AdapterStack.build(default_config),
                                   _images(default_config, 3))
        assert out.patch_features.shape == (3, 16, 32)
        assert out.cls_adapted.shape == (3, 32)
        assert torch.isfinite(out.patch_features).all()

    def test_prefix_matches_full_run(self, encoders, default_config):
        vision, _ = encoders
        x = _images(default_config, 2)
        stack = AdapterStack.build(default_config)
        full = encode_image_adapted(vision, stack, x)
        cached = encode_image_adapted(vision, stack, prefix=frozen_prefix(vision, 10, x))
        assert torch.equal(full.cls_adapted, cached.cls_adapted)
        assert torch.equal(full.patch_features, cached.patch_features)

    def test_empty_stack_rejected(self, encoders, default_config):
        vision, _ = encoders
        with pytest.raises(ConfigurationError):
            encode_image_adapted(vision, AdapterStack([]), _images(default_config, 1))

    def test_image_prompt_patch_shape(self, encoders, default_config):
        vision, _ = encoders
        out = encode_image_adapted(vision, AdapterStack([]), _images(default_config, 2),
                                   image_prompt=ImagePrompt(default_config, 4))
        assert out.patch_features.shape == (2, 16, 32)

    def test_gradient_wrt_w1(self, encoders, default_config):
        vision, _ = encoders
        x = _images(default_config, 2)
        prefix = frozen_prefix(vision, 10, x)
        stack = AdapterStack.build(default_config)
        a = stack.adapters[0]
        rng = np.random.default_rng(3)
        with torch.no_grad():
            a.w2.copy_(torch.from_numpy(rng.standard_normal(tuple(a.w2.shape)) * 0.2))
        probe = torch.from_numpy(rng.standard_normal((2, 32)))

        def f():
            with torch.no_grad():
                return float((encode_image_adapted(vision, stack, prefix=prefix).cls_adapted
                              * probe).sum())

        (encode_image_adapted(vision, stack, prefix=prefix).cls_adapted * probe).sum().backward()
        num = central_differences(f, a.w1)
        assert relative_error(a.w1.grad.numpy(), num).max() < 1e-4

    def test_encoder_weights_get_no_gradient(self, default_config):
        from mvsl.encoders import build_encoders
        vision, _ = build_encoders(default_config)
        stack = AdapterStack.build(default_config)
        out = encode_image_adapted(vision, stack, _images(default_config, 2))
        (out.cls_adapted.sum() + out.patch_features.sum()).backward()
        assert all(p.grad is None for p in vision.parameters())
        assert stack.adapters[0].w1.grad is not None


class TestPrompt:
    def test_default_phrase_four_vectors(self, encoders):
        _, text = encoders
        ctx = init_prompt_context(text)
        assert ctx.P.shape == (4, 64)
        assert ctx.P.requires_grad

    def test_reinit_identical(self, encoders):
        _, text = encoders
        assert torch.equal(init_prompt_context(text).P, init_prompt_context(text).P)

    def test_single_word(self, encoders):
        _, text = encoders
        assert init_prompt_context(text, "photo").M == 1

    def test_bad_phrase(self, encoders):
        _, text = encoders
        with pytest.raises(ConfigurationError):
            init_prompt_context(text, "...")

    def test_empty_context_rejected(self):
        with pytest.raises(ConfigurationError):
            PromptContext(torch.zeros(0, 8, dtype=DTYPE))

    def test_shape_and_identical_rows(self, encoders, default_config):
        _, text = encoders
        seqs = [tokenize(n, default_config) for n in ("glioma", "normal brain", "glioma")]
        out = encode_text_prompted(text, init_prompt_context(text), seqs)
        assert out.shape == (3, 32)
        assert torch.equal(out[0], out[2])

    def test_context_equals_hard_prompt(self, encoders, default_config):
        # unmodified context vectors are the init phrase's own embeddings
        _, text = encoders
        learned = encode_text_prompted(text, init_prompt_context(text),
                                       [tokenize("glioma", default_config)])
        hard = encode_text_frozen(text, [tokenize("a photo of a glioma", default_config)])
        np.testing.assert_allclose(learned.detach().numpy(), hard.numpy(), rtol=0, atol=1e-12)

    def test_permutation_purity(self, encoders, default_config):
        _, text = encoders
        ctx = init_prompt_context(text)
        seqs = [tokenize(n, default_config) for n in ("glioma", "normal brain", "pituitary")]
        out = encode_text_prompted(text, ctx, seqs)
        perm = [1, 2, 0]
        out_p = encode_text_prompted(text, ctx, [seqs[i] for i in perm])
        np.testing.assert_allclose(out_p.detach().numpy(), out[perm].detach().numpy(),
                                   rtol=0, atol=1e-12)

    def test_overflow(self, encoders, default_config):
        _, text = encoders
        seq = tokenize(" ".join(["w"] * 30), default_config)
        with pytest.raises(InputError):
            encode_text_prompted(text, init_prompt_context(text), [seq])

    def test_gradient_wrt_context(self, small_encoders, small_config):
        _, text = small_encoders
        ctx = init_prompt_context(text)
        seqs = [tokenize(n, small_config) for n in ("glioma", "normal brain")]
        probe = torch.from_numpy(np.random.default_rng(0).standard_normal((2, 8)))

        def f():
            with torch.no_grad():
                return float((encode_text_prompted(text, ctx, seqs) * probe).sum())

        (encode_text_prompted(text, ctx, seqs) * probe).sum().backward()
        num = central_differences(f, ctx.P)
        assert relative_error(ctx.P.grad.numpy(), num).max() < 1e-4

    def test_text_adapter_alpha_one_is_frozen(self, encoders, default_config):
        _, text = encoders
        seqs = [tokenize(n, default_config) for n in ("a photo of a glioma", "a photo of a cyst")]
        stack = AdapterStack.build(default_config, alpha=1.0)
        assert torch.equal(encode_text_adapted(text, stack, seqs), encode_text_frozen(text, seqs))
