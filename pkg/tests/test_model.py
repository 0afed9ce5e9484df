"""Model assembly: trunk shapes, camera heads, checkpoints, accounting."""

import numpy as np
import pytest

from versadepth.errors import (CameraLookupError, DuplicateCameraError,
                               FormatError)
from versadepth.model import (Crde, ModelConfig, MultiDecoderModel,
                              PyramidPooling, VdeModel, checkpoint_bytes,
                              checkpoint_from_bytes, load_checkpoint,
                              micro_config, paper_scale_config, save_checkpoint,
                              toy_config)
from versadepth.rng import Rng
from versadepth.tensor import Tensor, no_grad


def image(shape=(1, 3, 32, 32), seed=0, scale=1.0):
    data = np.random.default_rng(seed).uniform(-0.5, 0.5, size=shape)
    return Tensor((data * scale).astype(np.float32))


def micro_model(seed=0, **kw):
    return VdeModel(micro_config(), Rng(seed), **kw)


# -- configs -----------------------------------------------------------------


def test_zr_width_is_an_eighth_of_decoder_width():
    assert toy_config().zr_width == 32
    assert micro_config().zr_width == 4
    assert paper_scale_config().zr_width == 64


def test_config_round_trips_through_dict():
    cfg = micro_config()
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg


# -- pyramid pooling -----------------------------------------------------------


def test_pooling_preserves_spatial_constancy():
    pool = PyramidPooling(8, 4, Rng(1))
    x = Tensor(np.full((1, 8, 6, 6), 1.25))
    out = pool.forward(x)
    assert out.shape == (1, 4, 6, 6)
    # every branch of a constant map is constant, so the fused map is
    # spatially constant per channel
    first = out.data[:, :, :1, :1]
    assert np.allclose(out.data, np.broadcast_to(first, out.shape), atol=1e-12)


def test_pooling_output_shapes():
    # 64x64 toy image at 1/32 scale with a width-128 stem
    pool = PyramidPooling(256, 128, Rng(2))
    out = pool.forward(Tensor(np.random.default_rng(3).normal(size=(1, 256, 2, 2))))
    assert out.shape == (1, 128, 2, 2)
    # paper geometry, narrow widths to stay cheap
    pool = PyramidPooling(16, 8, Rng(4))
    out = pool.forward(Tensor(np.random.default_rng(5).normal(size=(1, 16, 15, 20))))
    assert out.shape == (1, 8, 15, 20)


# -- trunk -------------------------------------------------------------------


def test_trunk_shapes_quarter_and_full():
    model = micro_model()
    with no_grad():
        z_rel, e1, n_hat = model.crde.forward(image())
    assert z_rel.shape == (1, 4, 8, 8)  # H/4, zr_width
    assert e1.shape == (1, 4, 8, 8)  # first stage skip, cropped alike
    assert n_hat.shape == (1, 32, 32)


def test_trunk_pads_and_crops_ragged_extents():
    model = micro_model()
    with no_grad():
        z_rel, _, n_hat = model.crde.forward(image((1, 3, 70, 45), seed=6))
    assert z_rel.shape == (1, 4, 18, 12)  # ceil(70/4), ceil(45/4)
    assert n_hat.shape == (1, 70, 45)


def test_normalized_head_is_unclamped():
    model = micro_model(seed=7)
    with no_grad():
        _, _, n_hat = model.crde.forward(image(seed=8, scale=4.0))
    assert (n_hat.data < 0.0).any() and (n_hat.data > 0.0).any()


# -- cameras -----------------------------------------------------------------


def test_two_cameras_share_relative_estimate():
    model = micro_model(seed=9)
    model.add_camera("a", Rng(10))
    model.add_camera("b", Rng(11))
    img = image(seed=12)
    with no_grad():
        m_a, n_a = model.forward(img, "a")
        m_b, n_b = model.forward(img, "b")
    assert np.array_equal(n_a.data, n_b.data)
    assert not np.allclose(m_a.data, m_b.data)
    assert np.all(m_a.data > 0.0) and np.all(m_b.data > 0.0)


def test_forward_without_camera_gives_relative_only():
    model = micro_model(seed=13)
    with no_grad():
        m, n_hat = model.forward(image(seed=14))
    assert m is None
    assert n_hat.shape == (1, 32, 32)


def test_unknown_camera_raises_lookup_error():
    model = micro_model(seed=15)
    model.add_camera("a", Rng(16))
    with pytest.raises(CameraLookupError):
        with no_grad():
            model.forward(image(seed=17), "b")


def test_duplicate_camera_rejected():
    model = micro_model(seed=18)
    model.add_camera("a", Rng(19))
    with pytest.raises(DuplicateCameraError):
        model.add_camera("a", Rng(20))


def test_add_camera_leaves_existing_outputs_bit_identical():
    model = micro_model(seed=21)
    model.add_camera("a", Rng(22))
    img = image(seed=23)
    with no_grad():
        before_m, before_n = model.forward(img, "a")
    model.add_camera("b", Rng(24))
    with no_grad():
        after_m, after_n = model.forward(img, "a")
    assert np.array_equal(before_m.data, after_m.data)
    assert np.array_equal(before_n.data, after_n.data)


def test_anchors_initialized_per_camera():
    model = micro_model(seed=25)
    for cam in ("a", "b", "c"):
        model.add_camera(cam, Rng(hash(cam) % 1000))
    for cam, conv in model.r2mcs.items():
        assert np.all(conv.layer1.anchor.data == 2e-2)


def test_direct_head_modes():
    model = micro_model(seed=26, with_direct_head=True)
    with no_grad():
        out = model.direct_forward(image(seed=27))
    assert out.shape == (1, 32, 32)
    assert np.all(out.data > 0.0)
    bare = micro_model(seed=28)
    with pytest.raises(CameraLookupError):
        bare.direct_forward(image(seed=29))


# -- parameter accounting --------------------------------------------------------


def test_count_params_identities():
    model = micro_model(seed=30)
    counts = model.count_params()
    assert counts["total"] == counts["crde"]
    model.add_camera("a", Rng(31))
    model.add_camera("b", Rng(32))
    counts = model.count_params()
    assert counts["r2mc.a"] == counts["r2mc.b"]
    assert counts["total"] == counts["crde"] + 2 * counts["r2mc.a"]


def test_add_camera_grows_by_exactly_one_converter():
    model = micro_model(seed=33)
    model.add_camera("a", Rng(34))
    before = model.count_params()["total"]
    model.add_camera("b", Rng(35))
    after = model.count_params()
    assert after["total"] - before == after["r2mc.b"]


def test_toy_converter_is_under_five_percent_of_total():
    model = VdeModel(toy_config(), Rng(36))
    model.add_camera("a", Rng(37))
    counts = model.count_params()
    assert counts["r2mc.a"] < 0.05 * counts["total"]


# -- multi-decoder baseline -------------------------------------------------------


def test_multi_decoder_shares_encoder_but_not_decoders():
    model = MultiDecoderModel(micro_config(), Rng(38))
    model.add_camera("a", Rng(39))
    model.add_camera("b", Rng(40))
    img = image(seed=41)
    with no_grad():
        out_a = model.forward(img, "a")
        out_b = model.forward(img, "b")
    assert out_a.shape == (1, 32, 32)
    assert np.all(out_a.data > 0.0)
    assert not np.allclose(out_a.data, out_b.data)
    counts = model.count_params()
    assert counts["decoder.a"] == counts["decoder.b"]


# -- checkpoints -------------------------------------------------------------------


def test_checkpoint_round_trip_bit_exact(tmp_path):
    model = micro_model(seed=42)
    model.add_camera("cam", Rng(43))
    model.astype(np.float32)  # checkpoints store f32 blobs
    img = image(seed=44)
    with no_grad():
        before_m, before_n = model.forward(img, "cam")
    path = tmp_path / "model.ckpt"
    save_checkpoint(model, path)
    clone = load_checkpoint(path)
    with no_grad():
        after_m, after_n = clone.forward(img, "cam")
    assert np.array_equal(before_m.data, after_m.data)
    assert np.array_equal(before_n.data, after_n.data)
    # byte-stable serialization as well
    assert checkpoint_bytes(clone) == checkpoint_bytes(model)


def test_checkpoint_rejects_bad_magic():
    with pytest.raises(FormatError) as exc:
        checkpoint_from_bytes(b"NOPE" + b"\x00" * 64)
    assert "byte offset 0" in str(exc.value)


def test_checkpoint_rejects_bad_version():
    model = micro_model(seed=45)
    raw = bytearray(checkpoint_bytes(model))
    raw[4:8] = (99).to_bytes(4, "little")
    with pytest.raises(FormatError) as exc:
        checkpoint_from_bytes(bytes(raw))
    assert "99" in str(exc.value) and "byte offset 4" in str(exc.value)


def test_checkpoint_meta_restores_cameras(tmp_path):
    model = micro_model(seed=46, with_direct_head=True)
    model.add_camera("far", Rng(47))
    model.add_camera("near", Rng(48))
    path = tmp_path / "model.ckpt"
    save_checkpoint(model, path)
    clone = load_checkpoint(path)
    assert sorted(clone.cameras()) == ["far", "near"]
    assert clone.direct_head is not None
    assert clone.cfg == model.cfg
