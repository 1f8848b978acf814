import numpy as np
import pytest

from lightformer import tensor as T
from lightformer.arcface import _cosines
from lightformer.attention import HistoryBank, encoder_layer, subparams
from lightformer.checkpoint import (
    MAGIC,
    decode,
    encode,
    load_checkpoint,
    save_checkpoint,
)
from lightformer.config import ModelConfig, replace
from lightformer.errors import (
    CheckpointError,
    ConfigMismatchError,
    ContractError,
    ShapeError,
    TruncationError,
    VersionError,
)
from lightformer.model import LightFormer, backbone_forward, init_backbone_params
from lightformer.rng import make_rng
from lightformer.tensor import Tensor

SMALL = ModelConfig(buffer_size=3, embed_dim=8, num_heads=2, num_points=2,
                    image_height=32, image_width=64, seed=7)


def frames(seed, n=3, batch=1, cfg=SMALL):
    shape = (batch, n, 3, cfg.image_height, cfg.image_width)
    return make_rng(seed, "frames").uniform(0, 1, shape).astype(np.float32)


# -- backbone -------------------------------------------------------------------
def test_backbone_output_size():
    cfg = replace(SMALL, image_height=64, image_width=128)
    p = init_backbone_params(make_rng(0, "bb"), cfg)
    out = backbone_forward(np.zeros((2, 3, 64, 128), np.float32), p, cfg)
    assert out.shape == (2, 8, 2, 4)
    assert cfg.feature_size == (2, 4)


def test_zero_image_leaves_projection_bias():
    p = init_backbone_params(make_rng(1, "bb"), SMALL)
    p["proj.b"] = Tensor(np.arange(8, dtype=np.float32) - 3.5)
    out = backbone_forward(np.zeros((1, 3, 32, 64), np.float32), p, SMALL).data
    np.testing.assert_array_equal(out[0], np.broadcast_to(p["proj.b"].data[:, None, None], (8, 1, 2)))


GOLDEN_BACKBONE = np.array([
    [0.11501832, 0.83729112], [0.94319910, 1.10678911], [-0.24687791, -0.88695812],
    [-0.40975767, -0.30645305], [-0.81563687, -1.54448628], [-0.46557769, -0.40239114],
    [1.63447642, 1.18863654], [1.04627442, 1.01004267]], dtype=np.float32)


def test_backbone_regression_vector():
    p = init_backbone_params(make_rng(3, "golden.backbone"), SMALL)
    img = make_rng(3, "golden.image").uniform(0, 1, (1, 3, 32, 64)).astype(np.float32)
    out = backbone_forward(Tensor(img), p, SMALL).data
    assert out.dtype == np.float32
    np.testing.assert_allclose(out[0, :, 0, :], GOLDEN_BACKBONE, atol=1e-6)


def test_backbone_rejects_wrong_frame():
    p = init_backbone_params(make_rng(0, "bb"), SMALL)
    with pytest.raises(ShapeError):
        backbone_forward(np.zeros((1, 3, 32, 32), np.float32), p, SMALL)


# -- full model -----------------------------------------------------------------
# seed-7 SMALL model on frames(7) below; logits / 64 are the class cosines
GOLDEN_COSINES = np.array([[-21.875383, 26.628529], [-29.120926, -22.977741]]) / 64.0


def test_model_regression_cosines():
    x = make_rng(7, "golden.frames").uniform(0, 1, (1, 3, 3, 32, 64)).astype(np.float32)
    out = LightFormer(SMALL).forward(x)
    got = np.stack([out.straight_cosines.data[0], out.left_cosines.data[0]])
    np.testing.assert_allclose(got, GOLDEN_COSINES, atol=1e-6)


def test_forward_shapes_and_probabilities():
    out = LightFormer(SMALL).forward(frames(0, batch=2))
    assert out.straight_logits.shape == (2, 2) and out.embedding.shape == (2, 8)
    assert len(out.history) == 3
    p = out.probabilities()
    assert p.shape == (2, 2, 2)
    np.testing.assert_allclose(p.sum(-1), 1.0, atol=1e-6)
    np.testing.assert_array_equal(out.predictions(), p.argmax(-1))


def test_forward_is_deterministic():
    x = frames(1, batch=2)
    a, b = LightFormer(SMALL).forward(x), LightFormer(SMALL).forward(x)
    np.testing.assert_array_equal(a.straight_logits.data, b.straight_logits.data)
    np.testing.assert_array_equal(a.left_logits.data, b.left_logits.data)


def test_batch_items_are_independent():
    model = LightFormer(SMALL)
    x = frames(2, batch=3)
    joint = model.forward(x).embedding.data
    for i in range(3):
        np.testing.assert_allclose(model.forward(x[i:i + 1]).embedding.data[0], joint[i], atol=1e-6)


@pytest.mark.parametrize("seed", range(5))
def test_ablation_ignores_earlier_frames(seed):
    model = LightFormer(replace(SMALL, ablate_tsa=True, seed=seed))
    x = frames(seed)
    noisy = x.copy()
    noisy[:, :-1] = make_rng(seed, "noise").standard_normal(noisy[:, :-1].shape) * 10
    a, b = model.forward(x), model.forward(noisy)
    np.testing.assert_array_equal(a.straight_logits.data, b.straight_logits.data)
    np.testing.assert_array_equal(a.left_logits.data, b.left_logits.data)


def _frame_one_gradient(cfg, seed):
    model = LightFormer(cfg)
    x = Tensor(frames(seed), requires_grad=True, dtype=np.float32)
    out = model.forward(x)
    T.sum_(out.straight_logits + out.left_logits).backward()
    return x.grad[:, 0]


@pytest.mark.parametrize("seed", range(5))
def test_first_frame_gradient(seed):
    assert np.any(_frame_one_gradient(replace(SMALL, seed=seed), seed) != 0)
    assert np.all(_frame_one_gradient(replace(SMALL, seed=seed, ablate_tsa=True), seed) == 0)


def test_history_is_causal():
    model = LightFormer(SMALL)
    x = frames(3)
    base = model.forward(x).history
    for i in range(1, 3):
        changed = x.copy()
        changed[:, i:] = make_rng(i, "change").uniform(0, 1, changed[:, i:].shape)
        hist = model.forward(changed).history
        for j in range(i):
            np.testing.assert_array_equal(hist[j].data, base[j].data)
        assert not np.array_equal(hist[i].data, base[i].data)


def test_single_frame_reduces_to_self_attention_pipeline():
    cfg = replace(SMALL, buffer_size=1)
    model = LightFormer(cfg)
    x = frames(4, n=1)
    out = model.forward(x)
    maps = backbone_forward(Tensor(x[:, 0]), subparams(model.params, "backbone"), cfg)
    e = encoder_layer(T.reshape(model.params["query"], (1, 1, 8)), maps[:, None][:, 0], HistoryBank(),
                      subparams(model.params, "encoder"), 2, 2)
    cos = _cosines(T.reshape(e, (1, 8)), model.bank("straight"))
    np.testing.assert_allclose(out.straight_cosines.data, cos.data, atol=1e-6)


def test_wrong_buffer_length_names_n():
    with pytest.raises(ContractError, match="N=3"):
        LightFormer(SMALL).forward(frames(0, n=2))


def test_targets_apply_margin_only_to_logits():
    model = LightFormer(SMALL)
    x = frames(5)
    plain = model.forward(x)
    tgt = model.forward(x, targets=np.array([[0, 1]]))
    np.testing.assert_array_equal(plain.predictions(), tgt.predictions())
    assert tgt.straight_logits.data[0, 0] <= plain.straight_logits.data[0, 0]
    assert tgt.straight_logits.data[0, 1] == plain.straight_logits.data[0, 1]


# -- checkpoint -----------------------------------------------------------------
def test_checkpoint_round_trip(tmp_path):
    model = LightFormer(replace(SMALL, centres_per_class=2))
    path = save_checkpoint(model, tmp_path / "m.lfck")
    assert path.read_bytes()[:4] == MAGIC
    loaded = load_checkpoint(path)
    assert loaded.config == model.config
    assert sorted(loaded.params) == sorted(model.params)
    for name, p in model.params.items():
        np.testing.assert_array_equal(loaded.params[name].data, p.data)
    x = frames(6, batch=2)
    a, b = model.forward(x), loaded.forward(x)
    np.testing.assert_array_equal(a.straight_logits.data, b.straight_logits.data)
    np.testing.assert_array_equal(a.left_logits.data, b.left_logits.data)
    assert encode(loaded) == encode(model)


def test_truncated_checkpoint():
    blob = encode(LightFormer(SMALL))
    with pytest.raises(TruncationError):
        decode(blob[:-1])
    with pytest.raises(TruncationError):
        decode(blob[:6])


def test_mismatched_config_names_field():
    blob = encode(LightFormer(SMALL))
    with pytest.raises(ConfigMismatchError, match="embed_dim") as info:
        decode(blob, expected=replace(SMALL, embed_dim=16))
    assert info.value.field == "embed_dim"
    assert isinstance(info.value, VersionError)


def test_bad_magic_and_version():
    blob = encode(LightFormer(SMALL))
    with pytest.raises(VersionError):
        decode(b"XXXX" + blob[4:])
    with pytest.raises(VersionError):
        decode(blob[:4] + (2).to_bytes(4, "little") + blob[8:])


def test_foreign_parameter_rejected():
    model = LightFormer(SMALL)
    model.params["extra"] = Tensor(np.zeros(2, np.float32))
    with pytest.raises(CheckpointError, match="extra"):
        decode(encode(model))
