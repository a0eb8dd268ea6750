import numpy as np
import pytest

from conftest import central_diff, rel_err
import splatfit.autodiff as ad
from splatfit.appearance import (DecoderParams, EncoderParams, NetConfig,
                                 combine_features, decode, encode_pose,
                                 init_decoder, init_encoder,
                                 init_feature_tensor, load_network,
                                 save_network, tape_backward)
from splatfit.autodiff import Tape


TINY = NetConfig(feature_channels=4, encoder_widths=(4, 4, 4),
                 encoder_groups=2, trunk_dims=(6, 8), skip_at=1,
                 head_hidden=5, upsample=1)


def test_encoder_zero_input_zero_final_layer_gives_zero():
    enc = init_encoder(TINY, seed=0)
    out = encode_pose(np.zeros((16, 16, 3)), enc, tape=None)
    assert out.shape == (16, 16, 4)
    assert not out.any()
    # nonzero input: a fresh encoder still contributes exactly nothing
    out2 = encode_pose(np.random.default_rng(0).normal(size=(16, 16, 3)),
                       enc, tape=None)
    assert not out2.any()


def test_encoder_distinguishes_poses():
    cfg = TINY
    enc = init_encoder(cfg, seed=1)
    rng = np.random.default_rng(2)
    # give the final block weights so the output is informative
    enc.weights["u3.w"] = rng.normal(size=enc.weights["u3.w"].shape) * 0.1
    for trial in range(10):
        a = rng.normal(size=(16, 16, 3))
        b = rng.normal(size=(16, 16, 3))
        oa = encode_pose(a, enc, tape=None)
        ob = encode_pose(b, enc, tape=None)
        assert np.abs(oa - ob).max() > 1e-8


def test_encoder_rejects_bad_resolution():
    enc = init_encoder(TINY, seed=0)
    with pytest.raises(ValueError, match="divisible"):
        encode_pose(np.zeros((12, 12, 3)), enc, tape=None)


def test_encoder_gradients_match_fd():
    cfg = TINY
    enc = init_encoder(cfg, seed=3)
    rng = np.random.default_rng(4)
    enc.weights["u3.w"] = rng.normal(size=enc.weights["u3.w"].shape) * 0.05
    x = rng.normal(size=(8, 8, 3))
    probe = rng.normal(size=(8, 8, 4))

    tape = Tape()
    xv = tape.leaf(x, name="input")
    out = encode_pose(xv, enc, tape)
    loss = ad.sum_all(tape, ad.mul(tape, out, probe))
    grads = tape_backward(tape, loss)

    def forward(weights, x_in):
        e = EncoderParams(weights, cfg.encoder_widths, cfg.feature_channels,
                          cfg.encoder_groups)
        o = encode_pose(x_in, e, tape=None)
        return float((o * probe).sum())

    for name in ("d1.w", "d2.g", "u1.b", "u2.w", "u3.w", "u3.b", "d3.beta"):
        def f(w, name=name):
            ws = dict(enc.weights)
            ws[name] = w
            return forward(ws, x)

        fd = central_diff(f, enc.weights[name], h=1e-6)
        assert rel_err(grads[f"enc.{name}"], fd) < 1e-4, name

    fd_in = central_diff(lambda z: forward(enc.weights, z), x, h=1e-6)
    assert rel_err(grads["input"], fd_in) < 1e-4


def test_combine_stage1_depends_only_on_feature_tensor():
    rng = np.random.default_rng(5)
    F = rng.normal(size=(8, 8, 4))
    uv = rng.random((20, 2))
    out_none = combine_features(None, F, uv, upsample=1, tape=None)
    out_zero = combine_features(np.zeros_like(F), F, uv, upsample=1, tape=None)
    assert np.array_equal(out_none, out_zero)


def test_combine_upsample1_gathers_grid_values_exactly():
    rng = np.random.default_rng(6)
    O = rng.normal(size=(8, 8, 4))
    uv = rng.random((30, 2))
    out = combine_features(O, np.zeros((8, 8, 4)), uv, upsample=1, tape=None)
    from splatfit.template import uv_to_pixel
    pix = uv_to_pixel(uv, (8, 8))
    assert np.allclose(out, O[pix[:, 0], pix[:, 1]], atol=1e-14)


def test_combine_upsample_matches_closed_form_on_ramp():
    # linear ramp: gathered value equals the ramp at the fine pixel's source
    H = W = 8
    F = (1.5 * np.arange(H)[:, None] + 0.25 * np.arange(W)[None, :])[..., None]
    F = np.repeat(F, 2, axis=2)
    uv = np.array([[0.4, 0.3], [0.55, 0.62], [0.3, 0.45]])
    out = combine_features(None, F, uv, upsample=2, tape=None)
    from splatfit.template import uv_to_pixel
    fine = uv_to_pixel(uv, (16, 16))
    src_r = (fine[:, 0] + 0.5) / 2 - 0.5
    src_c = (fine[:, 1] + 0.5) / 2 - 0.5
    assert np.allclose(out[:, 0], 1.5 * src_r + 0.25 * src_c, atol=1e-12)


def test_combine_concat_mode():
    rng = np.random.default_rng(13)
    O = rng.normal(size=(8, 8, 4))
    F = rng.normal(size=(8, 8, 4))
    uv = rng.random((10, 2))
    out = combine_features(O, F, uv, upsample=1, tape=None, mode="concat")
    assert out.shape == (10, 8)
    left = combine_features(O, np.zeros_like(F), uv, 1, None)
    right = combine_features(None, F, uv, 1, None)
    assert np.allclose(out, np.concatenate([left, right], axis=1))


def test_combine_validates_shapes():
    with pytest.raises(ValueError, match="upsample"):
        combine_features(None, np.zeros((8, 8, 4)), np.zeros((2, 2)), 3, None)
    with pytest.raises(ValueError, match="match"):
        combine_features(np.zeros((4, 4, 4)), np.zeros((8, 8, 4)),
                         np.zeros((2, 2)), 1, None)


def test_decoder_zero_heads_give_zero_predictions():
    dec = init_decoder(TINY, seed=7)
    feats = np.random.default_rng(8).normal(size=(11, 4))
    off, col, scl = decode(feats, dec, tape=None)
    assert not off.any() and not col.any() and not scl.any()
    assert off.shape == (11, 3) and col.shape == (11, 3) and scl.shape == (11,)


def test_decoder_matches_hand_computed_chain():
    cfg = NetConfig(feature_channels=2, trunk_dims=(3, 4), skip_at=1,
                    head_hidden=2)
    dec = init_decoder(cfg, seed=9)
    rng = np.random.default_rng(10)
    for k in dec.weights:
        dec.weights[k] = rng.normal(size=dec.weights[k].shape)
    x = rng.normal(size=(1, 2))

    w = dec.weights
    h0 = np.maximum(x @ w["trunk0.w"] + w["trunk0.b"], 0)
    h1 = np.maximum(np.concatenate([h0, x], axis=1) @ w["trunk1.w"]
                    + w["trunk1.b"], 0)
    expected = {}
    for head in ("offset", "color", "scale"):
        hh = np.maximum(h1 @ w[f"{head}.w0"] + w[f"{head}.b0"], 0)
        expected[head] = hh @ w[f"{head}.w1"] + w[f"{head}.b1"]

    off, col, scl = decode(x, dec, tape=None)
    assert np.allclose(off, expected["offset"], atol=1e-12)
    assert np.allclose(col, expected["color"], atol=1e-12)
    assert np.allclose(scl, expected["scale"].ravel(), atol=1e-12)


def test_decoder_gradients_match_fd():
    dec = init_decoder(TINY, seed=11)
    rng = np.random.default_rng(12)
    for k in dec.weights:
        dec.weights[k] = rng.normal(size=dec.weights[k].shape) * 0.3
    feats = rng.normal(size=(6, 4))
    probes = {"offset": rng.normal(size=(6, 3)),
              "color": rng.normal(size=(6, 3)),
              "scale": rng.normal(size=6)}

    tape = Tape()
    fv = tape.leaf(feats, name="features")
    off, col, scl = decode(fv, dec, tape)
    loss = ad.add_n(tape, [
        ad.sum_all(tape, ad.mul(tape, off, probes["offset"])),
        ad.sum_all(tape, ad.mul(tape, col, probes["color"])),
        ad.sum_all(tape, ad.mul(tape, scl, probes["scale"]))])
    grads = tape_backward(tape, loss)

    def forward(weights, f_in):
        d = DecoderParams(weights, dec.in_dim, dec.trunk_dims, dec.skip_at,
                          dec.head_hidden)
        o, c, s = decode(f_in, d, tape=None)
        return float((o * probes["offset"]).sum() + (c * probes["color"]).sum()
                     + (s * probes["scale"]).sum())

    for name in ("trunk0.w", "trunk1.w", "trunk1.b", "offset.w1", "color.w0",
                 "scale.b1"):
        def f(w, name=name):
            ws = dict(dec.weights)
            ws[name] = w
            return forward(ws, feats)

        fd = central_diff(f, dec.weights[name], h=1e-6)
        assert rel_err(grads[f"dec.{name}"], fd) < 1e-4, name

    fd_in = central_diff(lambda z: forward(dec.weights, z), feats, h=1e-6)
    assert rel_err(grads["features"], fd_in) < 1e-4


def test_decoder_rejects_bad_width():
    dec = init_decoder(TINY, seed=0)
    with pytest.raises(ValueError, match="width"):
        decode(np.zeros((3, 7)), dec, tape=None)


def test_network_checkpoint_round_trip(tmp_path):
    cfg = TINY
    F = init_feature_tensor((8, 8), cfg.feature_channels, seed=1)
    dec = init_decoder(cfg, seed=2)
    enc = init_encoder(cfg, seed=3)
    path = tmp_path / "net.npz"
    save_network(path, F, dec, enc)
    F2, dec2, enc2 = load_network(path, expect_cfg=cfg)
    assert np.array_equal(F, F2)
    assert dec2.trunk_dims == dec.trunk_dims and dec2.skip_at == dec.skip_at
    for k in dec.weights:
        assert np.array_equal(dec.weights[k], dec2.weights[k])
    for k in enc.weights:
        assert np.array_equal(enc.weights[k], enc2.weights[k])

    bad = NetConfig(feature_channels=8)
    with pytest.raises(ValueError, match="channels"):
        load_network(path, expect_cfg=bad)

    save_network(tmp_path / "net1.npz", F, dec, encoder=None)
    _, _, enc_none = load_network(tmp_path / "net1.npz")
    assert enc_none is None


def test_feature_tensor_init_statistics():
    F = init_feature_tensor((32, 32), 8, seed=5, std=0.01)
    assert F.shape == (32, 32, 8)
    assert abs(F.std() - 0.01) < 2e-3
    assert np.array_equal(F, init_feature_tensor((32, 32), 8, seed=5, std=0.01))
