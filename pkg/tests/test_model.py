import numpy as np
import pytest

from pidinet.config import ArchConfig, parse_config
from pidinet.errors import ConfigError, DimensionError
from pidinet.model import (Conv, build_model, cdcm_forward, convert_model_for_inference,
                           count_macs, count_params, csam_forward, PiDiNetModel)
from pidinet.train import LossConfig, deep_supervision_loss


def small(text="[CARV]x4", c=8, csam=True, cdcm=True, seed=0, dtype=np.float32):
    return build_model(ArchConfig.from_string(text, c, csam, cdcm), seed=seed, dtype=dtype)


def rand_img(seed=0, h=32, w=32, n=1):
    return np.random.default_rng(seed).random((n, 3, h, w)).astype(np.float32)


def test_output_shapes_and_range():
    m = small()
    for h, w in [(16, 16), (32, 24), (40, 56)]:
        side, fused = m.forward(rand_img(h=h, w=w))
        assert len(side) == 4
        for y in side + [fused]:
            assert y.shape == (1, 1, h, w)
            assert np.all((y > 0) & (y < 1))


def test_batch_matches_single():
    m = small()
    x = rand_img(n=2)
    _, fused = m.forward(x)
    np.testing.assert_allclose(fused[1:], m.forward(x[1:])[1], rtol=1e-5, atol=1e-6)


def test_too_small_input():
    with pytest.raises(DimensionError):
        small().forward(rand_img(h=8, w=32))
    with pytest.raises(DimensionError):
        small().forward(np.zeros((1, 1, 32, 32), np.float32))


def test_zero_input_spatially_constant():
    side, fused = small(dtype=np.float64).forward(np.zeros((1, 3, 32, 32)))
    for y in side + [fused]:
        assert y.var() < 1e-10


def test_deterministic_init():
    a, b = small(seed=3), small(seed=3)
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)
    c = small(seed=4)
    assert not np.array_equal(a.params["init.weight"], c.params["init.weight"])


def test_block_kinds_and_baseline():
    assert "".join(k.value for k in small().block_kinds()) == "CARV" * 4
    base = small("[V]x16", csam=False, cdcm=False)
    assert not any(c.is_pdc for c in base.convs())


def test_pdc_centers_frozen_at_zero():
    m = small()
    for c in m.convs():
        if c.is_pdc:
            assert np.all(m.params[c.name + ".weight"][:, :, 1, 1] == 0)


def test_fusion_init_average():
    m = small()
    np.testing.assert_array_equal(m.params["fusion.weight"].ravel(), [0.25] * 4)
    assert m.params["fusion.bias"].item() == 0


def test_single_conv_params():
    assert Conv("x", 3, 60, bias=False, k=3, padding=1).n_params() == 1620


def test_paper_scale_counts():
    full = build_model(ArchConfig.from_string("[CARV]x4", 60))
    tiny_l = build_model(ArchConfig.from_string("[CARV]x4", 20, False, False))
    assert abs(count_params(full) / 710_000 - 1) <= 0.10
    assert abs(count_params(tiny_l) / 73_000 - 1) <= 0.10
    assert abs(count_macs(full, 200, 200) / 3.43e9 - 1) <= 0.15
    assert abs(count_macs(tiny_l, 200, 200) / 2.70e8 - 1) <= 0.15


def test_macs_scale_with_area():
    m = small()
    assert count_macs(m, 64, 64) == 4 * count_macs(m, 32, 32)


@pytest.mark.parametrize("text", ["[CARV]x4", "C-[V]x15", "[RRRV]x4", "[AAAV]x4", "[R]x16"])
def test_conversion_equivalence(text):
    m = small(text)
    conv = convert_model_for_inference(m)
    assert not any(c.is_pdc for c in conv.convs())
    assert count_params(conv) >= count_params(m)
    x = rand_img(1)
    for a, b in zip(*[sum(mm.forward(x, difference=d)[:1], []) + [mm.forward(x, difference=d)[1]]
                      for mm, d in ((m, True), (conv, False))]):
        np.testing.assert_allclose(a, b, atol=1e-5)


def test_conversion_of_baseline_is_identity():
    m = small("[V]x16")
    conv = convert_model_for_inference(m)
    assert all(np.array_equal(m.params[k], conv.params[k]) for k in m.params)
    assert [c.weight_shape for c in m.convs()] == [c.weight_shape for c in conv.convs()]


def test_radial_converted_kernel_is_5x5():
    conv = convert_model_for_inference(small("[R]x16"))
    assert conv.params["init.weight"].shape[2:] == (5, 5)
    assert conv.params["block2.dw.weight"].shape[2:] == (5, 5)


def test_side_modules_do_not_touch_backbone():
    full, plain = small(cdcm=True, csam=True), small(cdcm=False, csam=False)
    backbone = [k for k in plain.params if not k.startswith(("side", "fusion"))]
    assert all(np.array_equal(full.params[k], plain.params[k]) for k in backbone)
    x = rand_img(2)
    for a, b in zip(full.backbone(x), plain.backbone(x)):
        np.testing.assert_array_equal(a, b)
    extra = set(full.params) - set(plain.params)
    assert extra and all(k.startswith("side") for k in extra)


def test_cdcm():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(1, 6, 24, 24))
    p = {"cdcm.reduce.weight": rng.normal(size=(4, 6, 1, 1)), "cdcm.reduce.bias": np.zeros(4)}
    for d in (5, 7, 9, 11):
        p[f"cdcm.branch{d}.weight"] = np.zeros((4, 4, 3, 3))
    np.testing.assert_array_equal(cdcm_forward(x, p), 0)
    # one branch with an identity center tap passes the reduced map through
    p["cdcm.reduce.weight"] = np.ones((4, 6, 1, 1))
    for o in range(4):
        p["cdcm.branch7.weight"][o, o, 1, 1] = 1
    y = cdcm_forward(np.ones((1, 6, 24, 24)), p)
    assert y.shape == (1, 4, 24, 24)
    np.testing.assert_allclose(y, 6.0)


def test_cdcm_channels_must_be_below_c():
    with pytest.raises(ConfigError):
        ArchConfig(parse_config("[CARV]x4"), 8, cdcm_channels=8)


def test_csam():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(1, 5, 10, 10))
    p = {"csam.conv1.weight": np.zeros((4, 5, 1, 1)), "csam.conv1.bias": np.zeros(4),
         "csam.conv2.weight": np.zeros((1, 4, 3, 3))}
    np.testing.assert_allclose(csam_forward(x, p), 0.5 * x)
    p = {"csam.conv1.weight": rng.normal(size=(4, 5, 1, 1)), "csam.conv1.bias": rng.normal(size=4),
         "csam.conv2.weight": rng.normal(size=(1, 4, 3, 3))}
    y = csam_forward(x, p)
    assert y.shape == x.shape
    ratio = y / x
    assert np.all((ratio > 0) & (ratio < 1))


def toy_model(seed=0):
    cfg = ArchConfig(parse_config("C-R", length=2), base_channels=4, cdcm_channels=3,
                     stages=((1, 1), (1, 2)))
    return PiDiNetModel(cfg, seed=seed, dtype=np.float64)


def test_end_to_end_gradient():
    m = toy_model()
    rng = np.random.default_rng(0)
    # nudge off the init so biases and fusion weights are generic
    for k in m.params:
        m.params[k] = m.params[k] + rng.normal(scale=0.1, size=m.params[k].shape)
        if k.endswith(".weight") and m.params[k].shape[2:] == (3, 3) and ("init" in k or ".dw" in k):
            m.params[k][:, :, 1, 1] = 0
    x = rng.random((1, 3, 8, 8))
    y = (rng.random((1, 1, 8, 8)) < 0.3).astype(float)
    y[0, 0, 0, :3] = 0.2
    cfg = LossConfig()

    def loss():
        side, fused = m.forward(x)
        return deep_supervision_loss(side, fused, y, cfg)[0]

    side, fused, tape = m.forward_train(x)
    _, gs, gf = deep_supervision_loss(side, fused, y, cfg)
    grads = m.backward(tape, gs, gf)
    h = 1e-5
    good = total = 0
    for k, theta in m.params.items():
        for idx in np.ndindex(theta.shape):
            if theta.ndim == 4 and k in grads and (("init" in k) or (".dw" in k)) and idx[2:] == (1, 1):
                continue
            old = theta[idx]
            theta[idx] = old + h
            lp = loss()
            theta[idx] = old - h
            lm = loss()
            theta[idx] = old
            num = (lp - lm) / (2 * h)
            ana = grads[k][idx]
            total += 1
            good += abs(ana - num) <= 1e-3 * max(abs(num), abs(ana)) + 1e-7
    assert good / total >= 0.99
