import numpy as np
import pytest

from mcae import backbone as bb
from mcae.capsules import CapsuleMap, MaskTokenSpec, encoder_forward
from mcae.masking import BatchMask, MaskPlan, patchify, sample_mask
from mcae.numerics import ShapeError, Tensor, ops
from mcae.pipeline import MCAEModel, ModelConfig, encode, finetune_forward, pretrain_forward

TINY = dict(num_caps=4, caps_dim=4, encoder_layers=2, image_size=8, patch_size=2, backbone_depth=2)


def _images(n=3, seed=0, size=8):
    return np.random.default_rng(seed).random((n, 1, size, size)).astype(np.float32)


def _perturb_masked(x, bm, P, seed=99):
    y = x.copy()
    rng = np.random.default_rng(seed)
    g = x.shape[-1] // P
    for b, plan in enumerate(bm.plans):
        for loc in plan.masked_indices:
            r, c = divmod(loc, g)
            y[b, :, r * P:(r + 1) * P, c * P:(c + 1) * P] = rng.random((x.shape[1], P, P))
    return y


def test_config_text_round_trip():
    cfg = ModelConfig(backbone="vit", num_caps=8, init_std=0.1)
    assert ModelConfig.from_text("phase=pretrain\n" + cfg.to_text()) == cfg


def test_config_rejects_bad_values():
    with pytest.raises(ValueError):
        ModelConfig(backbone="resnet")
    with pytest.raises(ValueError):
        ModelConfig(image_size=28, patch_size=5)


@pytest.mark.parametrize("backbone", ["convmixer", "vit"])
def test_pretrain_shapes(backbone):
    cfg = ModelConfig(backbone=backbone, **TINY)
    m = MCAEModel.build(cfg, "pretrain", 0)
    x = _images()
    bm = BatchMask([sample_mask(cfg.L, 0.5, i) for i in range(3)])
    pred, target = pretrain_forward(m, x, bm, rng=np.random.default_rng(0))
    assert pred.shape == (3, 16, 4)
    assert target.patches.shape == (3, 16, 4)
    np.testing.assert_array_equal(target.patches, patchify(x, 2).patches)


@pytest.mark.parametrize("backbone", ["convmixer", "vit"])
@pytest.mark.parametrize("training", [True, False])
def test_pretrain_predictions_ignore_masked_pixels(backbone, training):
    cfg = ModelConfig(backbone=backbone, **TINY)
    x = _images()
    bm = BatchMask([sample_mask(cfg.L, 0.5, 10 + i) for i in range(3)])
    y = _perturb_masked(x, bm, cfg.patch_size)
    outs = []
    for img in (x, y):
        m = MCAEModel.build(cfg, "pretrain", 0).train(training)
        pred, target = pretrain_forward(m, img, bm, rng=np.random.default_rng(5))
        outs.append((pred.data, target.patches))
    assert np.array_equal(outs[0][0], outs[1][0])
    assert not np.array_equal(outs[0][1], outs[1][1])


def test_pretrain_deterministic():
    cfg = ModelConfig(**TINY)
    x = _images()
    bm = BatchMask([sample_mask(cfg.L, 0.5, i) for i in range(3)])
    a = pretrain_forward(MCAEModel.build(cfg, "pretrain", 3), x, bm, rng=np.random.default_rng(1))[0]
    b = pretrain_forward(MCAEModel.build(cfg, "pretrain", 3), x, bm, rng=np.random.default_rng(1))[0]
    assert np.array_equal(a.data, b.data)


def test_pretrain_unmasked_is_plain_autoencoding():
    cfg = ModelConfig(**TINY)
    m = MCAEModel.build(cfg, "pretrain", 0)
    pred, _ = pretrain_forward(m, _images(), MaskPlan.none(cfg.L))
    pred2, _ = pretrain_forward(m, _images(), None)
    assert pred.shape == (3, 16, 4)
    assert np.array_equal(pred.data, pred2.data)


def test_mask_token_noise_changes_nothing_when_activation_fill_zero():
    cfg = ModelConfig(**TINY)
    m = MCAEModel.build(cfg, "pretrain", 0).eval()
    x = _images()
    bm = BatchMask([sample_mask(cfg.L, 0.5, i) for i in range(3)])
    spec = MaskTokenSpec(sigma=0.5)
    a = pretrain_forward(m, x, bm, spec, np.random.default_rng(1))[0]
    b = pretrain_forward(m, x, bm, spec, np.random.default_rng(2))[0]
    assert np.array_equal(a.data, b.data)


@pytest.mark.parametrize("backbone", ["convmixer", "vit"])
def test_finetune_scores_form_distribution(backbone):
    cfg = ModelConfig(backbone=backbone, **TINY)
    m = MCAEModel.build(cfg, "finetune", 0)
    s = finetune_forward(m, _images())
    assert s.shape == (3, 10)
    assert ((s.data >= 0) & (s.data <= 1)).all()
    np.testing.assert_allclose(s.data.sum(1), 1.0, atol=1e-5)


def test_zero_route_logits_give_uniform_scores():
    cfg = ModelConfig(**TINY)
    m = MCAEModel.build(cfg, "finetune", 0)
    m.head.W_route.data[...] = 0
    s = finetune_forward(m, _images())
    np.testing.assert_allclose(s.data, 0.1, atol=1e-6)


def test_phase_guards():
    cfg = ModelConfig(**TINY)
    with pytest.raises(ValueError):
        finetune_forward(MCAEModel.build(cfg, "pretrain"), _images())
    with pytest.raises(ValueError):
        pretrain_forward(MCAEModel.build(cfg, "finetune"), _images(), None)


def test_wrong_image_shape():
    m = MCAEModel.build(ModelConfig(**TINY), "finetune")
    with pytest.raises(ShapeError):
        finetune_forward(m, np.zeros((1, 1, 10, 10), np.float32))


@pytest.mark.parametrize("backbone", ["convmixer", "vit"])
def test_finetune_graph_shares_encoder_with_pretrain_graph(backbone):
    cfg = ModelConfig(backbone=backbone, **TINY)
    pre = MCAEModel.build(cfg, "pretrain", 0).eval()
    ft = pre.for_finetune(seed=4).eval()
    x = _images()
    a, _ = encode(pre, x, MaskPlan.none(cfg.L))
    b, _ = encode(ft, x, None)
    assert np.array_equal(a.poses.data, b.poses.data)
    assert np.array_equal(a.activations.data, b.activations.data)
    assert ft.decoder is None and ft.head is not None
    assert not any(k.startswith(("decoder.", "projection.")) for k in ft.named_parameters())


def test_parameter_names_and_state_round_trip():
    cfg = ModelConfig(**TINY)
    m = MCAEModel.build(cfg, "pretrain", 0)
    names = set(m.named_parameters())
    assert {"backbone.patch_embed.weight", "primary.W_act", "encoder.0.W_route", "encoder.1.b_pose",
            "decoder.W_pose", "projection.W_px", "projection.b_px"} <= names
    assert "backbone.stem_norm.running_mean" in m.named_buffers()
    other = MCAEModel.build(cfg, "pretrain", 1)
    other.load_state(m.state())
    for k, v in m.state().items():
        assert np.array_equal(v, other.state()[k])


def test_load_state_reports_mismatched_tensor():
    a = MCAEModel.build(ModelConfig(**TINY), "finetune")
    b = MCAEModel.build(ModelConfig(**{**TINY, "num_caps": 2, "caps_dim": 8}), "finetune")
    with pytest.raises(ShapeError, match="primary.W_act"):
        a.load_state(b.state())


def test_astype_float64_matches_float32():
    cfg = ModelConfig(**TINY)
    m = MCAEModel.build(cfg, "finetune", 0).eval()
    m64 = m.astype(np.float64)
    assert all(p.dtype == np.float64 for p in m64.named_parameters().values())
    np.testing.assert_allclose(finetune_forward(m, _images()).data, finetune_forward(m64, _images()).data,
                               rtol=1e-4, atol=1e-6)


def test_encoder_isotropy_through_pipeline():
    cfg = ModelConfig(**TINY)
    m = MCAEModel.build(cfg, "finetune", 0).eval()
    x = _images()
    enc_full, _ = encode(m, x)
    t = bb.patch_embed(x, m.patch_embed)
    t = m.stem_norm(ops.gelu(t), False)
    t = bb.convmixer_forward(t, cfg.grid, None, m.mixer, False)
    prim = bb.to_primary_capsules(t, m.primary, cfg.grid)
    for loc in (0, 5, 15):
        one = CapsuleMap(Tensor(prim.poses.data[:, loc:loc + 1]), Tensor(prim.activations.data[:, loc:loc + 1]),
                         (1, 1))
        out = encoder_forward(one, m.encoder)
        assert np.array_equal(out.poses.data[:, 0], enc_full.poses.data[:, loc])
        assert np.array_equal(out.activations.data[:, 0], enc_full.activations.data[:, loc])
