import numpy as np
import pytest

import scvm.tensor as T
from scvm.backbone import (
    BackboneConfig,
    TransformerBlock,
    VisionBackbone,
    images_to_patches,
)
from scvm.gradcheck import grad_check
from scvm.tensor import ShapeError, Tensor


def small_cfg(**kw):
    base = dict(image_size=8, patch_size=4, dim=8, layers=2, heads=2, mlp_ratio=2)
    base.update(kw)
    return BackboneConfig(**base)


def test_token_count_default_dims():
    cfg = BackboneConfig()  # 16x16 image, patch 4
    assert cfg.n_patches == 16
    assert cfg.n_tokens == 17


def test_config_validation():
    with pytest.raises(ValueError, match="divisible"):
        BackboneConfig(image_size=10, patch_size=4)
    with pytest.raises(ValueError, match="divisible"):
        BackboneConfig(dim=30, heads=4)


def test_patchify_layout():
    img = np.arange(16 * 16 * 3, dtype=np.float32).reshape(1, 16, 16, 3)
    patches = images_to_patches(img, 4)
    assert patches.shape == (1, 16, 48)
    # first patch is the top-left 4x4 block, pixels row-major
    np.testing.assert_array_equal(
        patches[0, 0].reshape(4, 4, 3), img[0, :4, :4, :]
    )
    np.testing.assert_array_equal(
        patches[0, 1].reshape(4, 4, 3), img[0, :4, 4:8, :]
    )


def test_zero_image_zero_proj_gives_positional_embeddings():
    cfg = small_cfg()
    rng = np.random.default_rng(0)
    backbone = VisionBackbone(cfg, rng)
    backbone.patch.proj.w.tensor.data[:] = 0.0
    backbone.patch.proj.b.tensor.data[:] = 0.0
    backbone.patch.cls.tensor.data[:] = 0.0
    patches = Tensor(np.zeros((1, cfg.n_patches, cfg.patch_dim)))
    tokens = backbone.embed(patches)
    np.testing.assert_array_equal(tokens.data[0], backbone.patch.pos.data)


def test_patch_embed_rejects_wrong_shape():
    cfg = small_cfg()
    backbone = VisionBackbone(cfg, np.random.default_rng(0))
    with pytest.raises(ShapeError, match="patch_embed"):
        backbone.embed(Tensor(np.zeros((1, 3, cfg.patch_dim))))


def test_block_with_zero_weights_is_identity():
    cfg = small_cfg()
    block = TransformerBlock(cfg, np.random.default_rng(1), "blk")
    for lin in (block.attn.q, block.attn.k, block.attn.v, block.attn.out,
                block.mlp.fc1, block.mlp.fc2):
        lin.w.tensor.data[:] = 0.0
        lin.b.tensor.data[:] = 0.0
    x = Tensor(np.random.default_rng(2).normal(size=(2, 5, cfg.dim)))
    out = block(x)
    np.testing.assert_array_equal(out.data, x.data)


def test_single_token_attention_is_one():
    cfg = small_cfg()
    block = TransformerBlock(cfg, np.random.default_rng(3), "blk")
    x = Tensor(np.random.default_rng(4).normal(size=(1, 1, cfg.dim)))
    _, probs = block.attn.with_probs(block.ln1(x))
    np.testing.assert_allclose(probs.data, np.ones((1, cfg.heads, 1, 1)), atol=1e-7)


def test_shapes_constant_across_layers():
    cfg = small_cfg()
    backbone = VisionBackbone(cfg, np.random.default_rng(5))
    x = backbone.embed(Tensor(np.zeros((3, cfg.n_patches, cfg.patch_dim))))
    for block in backbone.blocks:
        x = block(x)
        assert x.shape == (3, cfg.n_tokens, cfg.dim)


def test_block_and_patch_gradients():
    with T.precision("float64"):
        cfg = small_cfg(layers=1)
        rng = np.random.default_rng(6)
        backbone = VisionBackbone(cfg, rng)
        patches = Tensor(rng.uniform(0, 1, (1, cfg.n_patches, cfg.patch_dim)))
        w = Tensor(rng.standard_normal((1, cfg.n_tokens, cfg.dim)))

        def f():
            return T.reduce_sum(backbone.forward_plain(patches) * w)

        wrt = [p.tensor for p in backbone.params()]
        assert grad_check(f, wrt) < 1e-4
