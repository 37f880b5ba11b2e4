"""Layers, topology construction, batch-norm folding and model files."""
import numpy as np
import pytest

from beaa.model import (
    Affine,
    AvgPool2d,
    BatchNorm2d,
    Conv2d,
    Fire,
    GlobalAvgPool,
    Network,
    PolyAct,
    ReLU,
    ShapeError,
    avg_pool,
    build_sequential,
    build_squeezenet_opt,
    fold_batchnorm,
    forward_plain,
    global_avg_pool,
    has_batchnorm,
    load_model,
    load_topology_config,
    save_model,
)
from gradcheck import probe_gradients


def naive_conv(x, w, b, stride, pad):
    """Direct nested-loop convolution."""
    m, ci, h, wd = x.shape
    o, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    out = np.zeros((m, o, ho, wo))
    for n in range(m):
        for oc in range(o):
            for i in range(ho):
                for j in range(wo):
                    acc = b[oc]
                    for c in range(ci):
                        for di in range(k):
                            for dj in range(k):
                                acc += w[oc, c, di, dj] * xp[n, c, i * stride + di, j * stride + dj]
                    out[n, oc, i, j] = acc
    return out


@pytest.mark.parametrize("k,stride,pad", [(1, 1, 0), (3, 1, 1), (3, 2, 0), (3, 2, 1)])
def test_conv_matches_naive_oracle(k, stride, pad):
    rng = np.random.default_rng(k + stride + pad)
    x = rng.normal(size=(2, 3, 7, 6))
    w = rng.normal(size=(4, 3, k, k))
    b = rng.normal(size=4)
    y, _ = Conv2d(3, 4, k, stride, pad, w, b).forward(x)
    assert np.max(np.abs(y - naive_conv(x, w, b, stride, pad))) < 1e-6


def test_identity_1x1_conv():
    x = np.random.default_rng(0).normal(size=(2, 3, 4, 4))
    y, _ = Conv2d(3, 3, 1, weight=np.eye(3)[:, :, None, None], bias=np.zeros(3)).forward(x)
    assert np.array_equal(y, x)


def test_zero_weights_give_zero_logits():
    net = build_squeezenet_opt(10, (3, 16, 16), "element", seed=0)
    net.set_parameters({k: np.zeros_like(v) for k, v in net.parameters().items()
                        if k.endswith(".W") or k.endswith(".b")})
    logits, _ = forward_plain(net, np.random.default_rng(1).normal(size=(2, 3, 16, 16)))
    assert logits.shape == (2, 10)
    # every conv output is zero, so the logits reduce to the last BN shift
    assert np.allclose(logits, logits[0]) and np.allclose(logits, 0)


def test_linearity_of_linear_layers():
    rng = np.random.default_rng(2)
    layers = [Conv2d(2, 3, 3, 1, 1, rng.normal(size=(3, 2, 3, 3)), np.zeros(3)),
              Affine(2, rng.normal(size=2), np.zeros(2)), AvgPool2d(2), GlobalAvgPool(),
              Fire([("squeeze", Conv2d(2, 2, 1, weight=rng.normal(size=(2, 2, 1, 1)),
                                       bias=np.zeros(2)))],
                   Conv2d(2, 1, 1, weight=rng.normal(size=(1, 2, 1, 1)), bias=np.zeros(1)),
                   Conv2d(2, 2, 3, 1, 1, rng.normal(size=(2, 2, 3, 3)), np.zeros(2)), [])]
    x, z = rng.normal(size=(2, 3, 2, 4, 4))
    a, b = 1.7, -0.3
    for layer in layers:
        assert layer.linear()
        lhs = layer.forward(a * x + b * z)[0]
        rhs = a * layer.forward(x)[0] + b * layer.forward(z)[0]
        assert np.max(np.abs(lhs - rhs)) < 1e-9
    assert not ReLU().linear() and not PolyAct("layer", (2, 4, 4)).linear()


def test_pool_examples():
    assert avg_pool(np.array([[[1.0, 2.0], [3.0, 4.0]]]), 2)[0, 0, 0] == 2.5
    assert np.all(global_avg_pool(np.full((3, 5, 5), 1.25)) == 1.25)
    x = np.random.default_rng(3).normal(size=(2, 4, 4))
    assert np.allclose(avg_pool(3.0 * x, 2), 3.0 * avg_pool(x, 2))
    assert avg_pool(np.zeros((1, 5, 5)), 2).shape == (1, 2, 2)  # floor, trailing row dropped
    with pytest.raises(ShapeError):
        avg_pool(np.zeros((1, 1, 1)), 2)
    with pytest.raises(ValueError):
        AvgPool2d(0)


def test_squeezenet_module_counts_and_shapes():
    net = build_squeezenet_opt(10, (3, 32, 32), "relu")
    assert net.module_counts() == {"Conv": 4, "Fire": 2, "Pool": 3}
    assert net.shapes()[-1] == (10,)
    assert isinstance(net.layers[-1][1], BatchNorm2d) or net.shapes()[-1] == (10,)
    kinds = [type(l).__name__ for n, l in net.layers if n.startswith("pool")]
    assert kinds[-1] == "GlobalAvgPool"
    assert build_squeezenet_opt(5, (3, 32, 32), "element").num_classes == 5
    assert build_squeezenet_opt(5, (3, 32, 32), "element").shapes()[-1] == (5,)


def test_squeezenet_conv_module_structure():
    net = build_squeezenet_opt(10, (3, 32, 32), "channel")
    name, kind, members = net.modules[0]
    assert kind == "Conv"
    assert [type(net[m]).__name__ for m in members] == ["Conv2d", "PolyAct", "BatchNorm2d"]


def test_squeezenet_errors():
    with pytest.raises(ValueError):
        build_squeezenet_opt(1)
    with pytest.raises(ShapeError):
        build_squeezenet_opt(10, (3, 2, 2))
    with pytest.raises(ValueError):
        build_squeezenet_opt(10, activation="sigmoid")


def test_declared_widths():
    cfg = load_topology_config()
    conv1 = cfg["modules"][0]
    assert (conv1["out_channels"], conv1["kernel"], conv1["padding"]) == (32, 3, 1)
    net = build_squeezenet_opt(10, (3, 32, 32), "element")
    fires = [net[n] for n, k, _ in net.modules if k == "Fire"]
    assert all(f.out_channels == 64 for f in fires)


def test_fire_channel_count():
    rng = np.random.default_rng(4)
    fire = Fire([("squeeze", Conv2d(6, 2, 1, weight=rng.normal(size=(2, 6, 1, 1)), bias=np.zeros(2)))],
                Conv2d(2, 3, 1, weight=rng.normal(size=(3, 2, 1, 1)), bias=np.zeros(3)),
                Conv2d(2, 5, 3, 1, 1, rng.normal(size=(5, 2, 3, 3)), np.zeros(5)), [])
    y, _ = fire.forward(rng.normal(size=(1, 6, 4, 4)))
    assert y.shape == (1, 8, 4, 4) and fire.out_channels == 8


def test_shape_mismatch_errors():
    net = build_sequential((2, 4, 4), 3, [("conv", 3, 1, 0), ("gap",)])
    with pytest.raises(ShapeError):
        net.forward(np.zeros((1, 3, 4, 4)))
    with pytest.raises(ShapeError):
        build_sequential((2, 4, 4), 5, [("conv", 3, 1, 0), ("gap",)])


def _random_bn(net, rng):
    bufs = {k: (rng.uniform(0.5, 2.0, v.shape) if k.endswith("running_var")
                else rng.normal(size=v.shape)) for k, v in net.buffers().items()}
    net.set_buffers(bufs)
    net.set_parameters({k: rng.normal(size=v.shape) for k, v in net.parameters().items()
                        if k.endswith("gamma") or k.endswith("beta")})


def test_fold_batchnorm_preserves_outputs():
    rng = np.random.default_rng(5)
    net = build_squeezenet_opt(10, (3, 16, 16), "element", seed=1, coeff_noise=0.05)
    _random_bn(net, rng)
    x = rng.normal(size=(3, 3, 16, 16))
    folded = fold_batchnorm(net)
    assert has_batchnorm(net) and not has_batchnorm(folded)
    a, b = net.forward(x)[0], folded.forward(x)[0]
    assert np.max(np.abs(a - b)) < 1e-6
    twice = fold_batchnorm(folded)
    assert np.array_equal(twice.forward(x)[0], b)


def test_fold_identity_bn():
    bn = BatchNorm2d(3, eps=0.0)
    scale, shift = bn.folded()
    assert np.array_equal(scale, np.ones(3)) and np.array_equal(shift, np.zeros(3))


def test_fold_rejects_unfrozen_stats():
    bn = BatchNorm2d(2, var=np.array([1.0, np.nan]))
    with pytest.raises(ValueError):
        bn.folded()


def test_bn_training_uses_batch_statistics():
    rng = np.random.default_rng(6)
    x = rng.normal(3.0, 2.0, size=(8, 2, 3, 3))
    y, cache = BatchNorm2d(2).forward(x, training=True)
    assert np.allclose(y.mean(axis=(0, 2, 3)), 0, atol=1e-12)
    assert np.allclose(y.var(axis=(0, 2, 3)), 1, atol=1e-4)


@pytest.mark.parametrize("act", ["relu", "layer", "channel", "element"])
def test_squeezenet_gradients(act):
    rng = np.random.default_rng(7)
    net = build_squeezenet_opt(3, (3, 8, 8), act, seed=2, coeff_noise=0.1)
    x = rng.normal(size=(2, 3, 8, 8))
    if act == "relu":
        x = x + 0.0  # kinks are measure-zero; random probes avoid them
    errs = probe_gradients(net, x, 40, rng)
    worst = max(e for _, e in errs)
    assert worst < 1e-4, errs


def test_model_file_roundtrip(tmp_path):
    rng = np.random.default_rng(8)
    net = build_squeezenet_opt(10, (3, 16, 16), "element", seed=3, coeff_noise=0.1)
    _random_bn(net, rng)
    save_model(tmp_path / "m.bin", net, {"note": "x"})
    back = load_model(tmp_path / "m.bin")
    assert back.topology() == net.topology()
    x = rng.normal(size=(2, 3, 16, 16))
    ref = net.astype(np.float32).astype(np.float64)
    assert np.max(np.abs(back.forward(x)[0] - ref.forward(x)[0])) < 1e-9
    bad = Network.from_topology(net.topology())
    assert isinstance(bad, Network)


def test_packaged_toy_config():
    cfg = load_topology_config("toy")
    assert "blocks" in cfg
