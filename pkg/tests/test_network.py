import numpy as np
import pytest

from mirrornet.gradcheck import grad_check
from mirrornet.network import ConfigError, MirrorNet, NetworkConfig, build_network, forward, predict
from mirrornet.tensor import ShapeError, sigmoid


def closed_form_count(cfg: NetworkConfig) -> int:
    """Learnable parameters from the layer table, independent of the builder."""
    def conv(cin, cout, k):
        return cout * cin * k * k + cout

    def cbr(cin, cout, k):
        return conv(cin, cout, k) + 2 * cout

    def cbam(c):
        return 2 * c * (c // cfg.reduction) + 2 * 7 * 7

    def block(c):
        cat = cfg.ccfe_scales * (c // 4)
        per_branch = conv(c, c // 4, 3) * (2 if cfg.contrast else 1)
        return cfg.ccfe_scales * per_branch + 2 * cat + cbam(cat) + cbr(cat, c, 1)

    total, cin = 0, 3
    for c in cfg.widths:
        total += cbr(cin, c, 3) + cbr(c, c, 3) + conv(c, 1, 1)
        if cfg.use_ccfe:
            total += cfg.ccfe_blocks * block(c) + cbam(cfg.ccfe_blocks * c) + cbr(cfg.ccfe_blocks * c, c, 1)
        cin = c
    return total


def tiny(**kw):
    base = dict(resolution=16, widths=(8, 16), supervision=2, loss_weights=(1, 1),
                ccfe_blocks=1, ccfe_scales=2, reduction=2)
    base.update(kw)
    return NetworkConfig(**base)


@pytest.mark.parametrize("cfg", [NetworkConfig(), NetworkConfig(contrast=False),
                                 NetworkConfig(use_ccfe=False), NetworkConfig(ccfe_blocks=1),
                                 NetworkConfig(ccfe_blocks=4, ccfe_scales=1)])
def test_parameter_count_closed_form(cfg):
    assert build_network(cfg).count() == closed_form_count(cfg)


def test_default_parameter_count():
    assert build_network(NetworkConfig()).count() == 2262524


def test_same_seed_is_bitwise_identical():
    a, b = build_network(tiny(seed=3)), build_network(tiny(seed=3))
    assert a.equals(b)
    assert not a.equals(build_network(tiny(seed=4)))


def test_init_scheme():
    store = build_network(tiny())
    for name, p in store.items():
        if p.kind in ("bias", "beta") or name.endswith("running_mean"):
            assert not p.data.any(), name
        elif p.kind == "gamma" or name.endswith("running_var"):
            assert np.all(p.data == 1), name
    w = store["fen.stage1.conv1.conv.weight"].data
    assert abs(w.std() - np.sqrt(2 / (16 * 9))) < 0.02


def test_narrow_widths_build_and_odd_width_rejected():
    build_network(NetworkConfig(widths=(8, 16, 32, 64)))
    with pytest.raises(ConfigError, match="width 6"):
        build_network(NetworkConfig(widths=(6, 16, 32, 64)))


@pytest.mark.parametrize("kw,msg", [
    (dict(widths=(16, 32)), "widths"),
    (dict(loss_weights=(1, 1)), "loss weights"),
    (dict(resolution=60), "divisible"),
    (dict(reduction=3), "reduction"),
    (dict(ccfe_scales=5), "scales"),
    (dict(stem_stride=3), "stem_stride"),
])
def test_invalid_configs_name_the_constraint(kw, msg):
    with pytest.raises((ConfigError, ValueError), match=msg):
        NetworkConfig(**kw).validate()


def test_output_shapes_and_determinism():
    cfg = NetworkConfig()
    store = build_network(cfg)
    x = np.random.default_rng(0).random((2, 3, 64, 64)).astype(np.float32)
    maps = forward(x, store, cfg)
    assert len(maps) == 4
    assert all(m.shape == (2, 1, 64, 64) for m in maps)
    assert all(np.array_equal(a, b) for a, b in zip(maps, forward(x, store, cfg)))


def test_input_size_must_divide():
    cfg = tiny()
    with pytest.raises(ShapeError):
        forward(np.zeros((1, 3, 18, 18)), build_network(cfg), cfg)
    with pytest.raises(ShapeError):
        forward(np.zeros((1, 1, 16, 16)), build_network(cfg), cfg)


def test_gate_saturation():
    rng = np.random.default_rng(1)
    feat = rng.standard_normal((1, 4, 8, 8))
    low, _ = MirrorNet._gate_fwd(feat, np.full((1, 1, 4, 4), -50.0))
    high, _ = MirrorNet._gate_fwd(feat, np.full((1, 1, 4, 4), 50.0))
    assert np.abs(low).max() < 1e-20
    np.testing.assert_allclose(high, feat, rtol=1e-15)


def test_gate_monotone_in_lower_logit():
    rng = np.random.default_rng(2)
    feat = rng.standard_normal((1, 3, 8, 8))
    m = rng.standard_normal((1, 1, 4, 4))
    before, _ = MirrorNet._gate_fwd(feat, m)
    m[0, 0, 1, 2] += 1.5
    after, _ = MirrorNet._gate_fwd(feat, m)
    assert np.all(np.abs(after) >= np.abs(before))


@pytest.mark.parametrize("value,expected", [(10.0, 1), (-10.0, 0), (0.0, 1)])
def test_predict_thresholding(monkeypatch, value, expected):
    cfg = tiny()
    store = build_network(cfg)
    monkeypatch.setattr("mirrornet.network.forward",
                        lambda image, params, config: [np.full((1, 1, 16, 16), value)])
    mask = predict(np.zeros((1, 3, 16, 16)), store, cfg, threshold=0.5)
    assert mask.dtype == np.uint8
    assert np.all(mask == expected)


def test_predict_rejects_bad_threshold():
    cfg = tiny()
    with pytest.raises(ValueError):
        predict(np.zeros((1, 3, 16, 16)), build_network(cfg), cfg, threshold=1.0)


def test_two_level_end_to_end_gradient():
    cfg = tiny(ccfe_blocks=2, ccfe_scales=2)
    store = build_network(cfg, np.float64)
    net = MirrorNet(cfg, store)
    rng = np.random.default_rng(3)
    x = rng.random((2, 3, 16, 16))
    w = [rng.standard_normal((2, 1, 16, 16)) for _ in range(2)]

    def f():
        return sum((m * g).sum() for m, g in zip(net.forward(x, training=True), w))

    f()
    store.zero_grad()
    gx = net.backward(w)
    assert grad_check(lambda v: sum((m * g).sum() for m, g in zip(net.forward(v, True), w)),
                      x, gx, max_checks=40, rng=rng).passed
    for name in ("fen.stage0.conv0.conv.weight", "ccfe1.block1.branch1.context.weight",
                 "ccfe0.fuse_att.spatial.weight", "head1.weight", "head0.bias"):
        p = store[name]
        analytic = p.grad.copy()

        def g(v, p=p):
            old = p.data.copy()
            p.data[...] = v
            out = f()
            p.data[...] = old
            return out

        r = grad_check(g, p.data.copy(), analytic, max_checks=20, rng=rng)
        assert r.passed, (name, str(r))


def test_inference_uses_running_stats():
    cfg = tiny()
    store = build_network(cfg, np.float64)
    net = MirrorNet(cfg, store)
    x = np.random.default_rng(4).random((2, 3, 16, 16))
    a = net.forward(x, training=False)[0]
    b = net.forward(x[:1], training=False)[0]
    np.testing.assert_allclose(a[:1], b, rtol=1e-12)
    assert np.all((sigmoid(a) > 0) & (sigmoid(a) < 1))
