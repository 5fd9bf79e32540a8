"""Smoke test for the amber_afno_py extension.

Build and install it first:
    pip install --no-build-isolation -e crates/python
Then run with pytest or as a script.
"""

import math
import tempfile

import numpy as np

import amber_afno_py as aa

TINY = """
[model]
input_shape = [8, 8, 8]
dims = [4, 8, 12, 16]
depths = [1, 1, 1, 1]
afno_blocks = [1, 1, 1, 1]
heads = [1, 1, 1, 1]
decoder_dim = 8
"""


def test_rfft3_matches_numpy():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((3, 4, 6, 2))
    re, im, shape = aa.rfft3(x.ravel().tolist(), list(x.shape))
    assert shape == [3, 4, 4, 2]
    ref = np.fft.rfftn(x, axes=(0, 1, 2))
    got = np.array(re).reshape(shape) + 1j * np.array(im).reshape(shape)
    assert np.max(np.abs(got - ref)) < 1e-10
    back, bshape = aa.irfft3(re, im, shape, 6)
    assert bshape == list(x.shape)
    assert np.max(np.abs(np.array(back).reshape(x.shape) - x)) < 1e-12


def test_model_forward_and_predict():
    m = aa.Model(TINY, seed=3)
    assert m.mixing == "afno"
    assert m.precision == 32
    assert m.param_count() == m.param_breakdown()["total_params"]
    img, labels, grid = aa.generate_phantom(TINY.replace("[model]", "[data.phantom]\ngrid = [8, 8, 8]\n[model]"), seed=1)
    assert grid == [8, 8, 8]
    logits, shape = m.forward(img, [1, 8, 8, 8, 1])
    assert shape == [1, 8, 8, 8, 2]
    assert all(math.isfinite(v) for v in logits)
    (pred,) = m.predict(img, [1, 8, 8, 8, 1])
    assert np.array_equal(np.array(pred), np.argmax(np.array(logits).reshape(-1, 2), axis=1))


def test_checkpoint_round_trip():
    m = aa.Model(TINY, seed=5, precision=64)
    with tempfile.TemporaryDirectory() as d:
        m.save(d)
        n = aa.Model.load(d, precision=64)
    name = m.param_names()[0]
    assert m.param(name) == n.param(name)
    assert m.config == n.config


def test_mixer_switch_and_costs():
    afno = aa.Model(TINY.replace("afno_blocks = [1, 1, 1, 1]", "afno_blocks = [1, 2, 4, 4]"))
    mhsa = aa.Model(TINY + 'mixing = "mhsa"\n')
    assert afno.param_count() < mhsa.param_count()
    s = aa.count_flops(TINY)
    assert s["total_params"] == aa.Model(TINY).param_count()
    assert s["total_flops"] == sum(e[2] for e in s["entries"])


def test_loss_and_metrics():
    g = np.zeros((1, 2, 2, 2, 2))
    g[..., 0] = 1.0
    g[0, 0, 0, 0] = [0.0, 1.0]
    loss = aa.hybrid_loss(g.ravel().tolist(), g.ravel().tolist(), list(g.shape))
    assert abs(loss) < 1e-4
    uniform = np.full_like(g, 0.5)
    assert aa.hybrid_loss(uniform.ravel().tolist(), g.ravel().tolist(), list(g.shape)) > loss

    truth = [0] * 64
    truth[21] = truth[22] = 1
    r = aa.evaluate(truth, truth, [4, 4, 4], 2)
    assert r["mean_dsc"] == 1.0 and r["mean_hd95"] == 0.0
    assert aa.dsc([True, False], [True, True]) == 2 / 3
    assert aa.hd95([True] + [False] * 7, [False] * 7 + [True], [2, 2, 2]) == math.sqrt(3)


def test_bad_input_raises_value_error():
    try:
        aa.Model("[model]\ndims = [1, 2]\n")
    except ValueError as e:
        assert "model" in str(e)
    else:
        raise AssertionError("invalid config accepted")


if __name__ == "__main__":
    for name, fn in sorted(globals().items()):
        if name.startswith("test_") and callable(fn):
            fn()
            print(f"ok  {name}")
