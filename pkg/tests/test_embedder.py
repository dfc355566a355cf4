import struct

import numpy as np
import pytest

from jointemb import embedder as E
from jointemb import kernels as K
from jointemb.kernels import numeric_grad

from conftest import max_rel_error


@pytest.fixture(scope="module")
def params():
    return E.init_params(k=8, seed=3)


def test_layer_shapes_follow_valid_convolutions():
    shapes = E.layer_shapes()
    assert E.flat_features() == 64 * 9 * 9
    assert shapes["fc1.w"] == (256, 5184)
    assert shapes["fc3.w"] == (8, 64)


def test_init_statistics():
    p = E.init_params(k=8, seed=0)
    for name, arr in p.layers.items():
        kind = name.split(".")[1]
        if kind == "b":
            assert not arr.any()
        elif kind == "a":
            assert np.all(arr == 0.25)
        else:
            bound = np.sqrt(1.0 / np.prod(arr.shape[1:]))
            assert np.abs(arr).max() <= bound


def test_forward_shapes(params):
    x = np.random.default_rng(0).random((3, 48, 48))
    out, cache = E.forward(params, x)
    assert out.shape == (3, 8)
    assert cache["z1"].shape == (3, 32, 44, 44)
    assert cache["p1"].shape == (3, 32, 22, 22)
    assert cache["z2"].shape == (3, 64, 18, 18)
    assert cache["f0"].shape == (3, 5184)


def test_zero_image_with_zero_biases_gives_fc3_bias():
    p = E.init_params(k=8, seed=1)
    p.layers["fc3.b"] = np.arange(8.0)
    np.testing.assert_array_equal(E.embed(np.zeros((48, 48)), p), np.arange(8.0))


def test_embed_is_deterministic(params):
    x = np.random.default_rng(1).random((48, 48))
    np.testing.assert_array_equal(E.embed(x, params), E.embed(x, params))


@pytest.mark.parametrize("shape", [(47, 48), (48, 48, 3), (1, 48)])
def test_embed_rejects_wrong_shape(params, shape):
    with pytest.raises(K.ShapeError):
        E.embed(np.zeros(shape), params)


def test_forward_matches_layer_by_layer_reference(params):
    # same network written with explicit per-sample loops over the kernels
    x = np.random.default_rng(2).random((2, 48, 48))
    out, _ = E.forward(params, x)
    L = params.layers
    for n in range(2):
        h = K.conv2d(x[n][None], L["conv1.w"], L["conv1.b"])
        h = np.where(h > 0, h, L["conv1.a"][:, None, None] * h)
        h = h.reshape(32, 22, 2, 22, 2).max(axis=(2, 4))
        h = K.conv2d(h, L["conv2.w"], L["conv2.b"])
        h = np.where(h > 0, h, L["conv2.a"][:, None, None] * h)
        h = h.reshape(64, 9, 2, 9, 2).max(axis=(2, 4)).reshape(-1)
        for layer in ("fc1", "fc2"):
            h = L[f"{layer}.w"] @ h + L[f"{layer}.b"]
            h = np.where(h > 0, h, L[f"{layer}.a"] * h)
        h = L["fc3.w"] @ h + L["fc3.b"]
        np.testing.assert_allclose(out[n], h, rtol=1e-10, atol=1e-12)


def test_embed_batch_equals_single(params):
    x = np.random.default_rng(3).random((5, 48, 48))
    batch = E.embed_batch(x, params, chunk=2)
    for i in range(5):
        np.testing.assert_allclose(batch[i], E.embed(x[i], params), rtol=1e-12, atol=1e-14)


def test_full_network_gradient_on_50_parameters():
    rng = np.random.default_rng(11)
    p = E.init_params(k=8, seed=5)
    for name in p.layers:
        if name.endswith(".b"):
            p.layers[name] = rng.normal(scale=0.05, size=p.layers[name].shape)
    x = rng.random((2, 48, 48))
    r = rng.normal(size=(2, 8))
    out, cache = E.forward(p, x)
    grads = E.backward(p, cache, r)
    f = lambda: float((E.forward(p, x)[0] * r).sum())
    names = sorted(p.layers)
    # the step must stay well below the smallest PReLU / max-pool margin in the
    # network, or the difference quotient straddles a kink
    errs = []
    for i in range(50):
        name = names[i % len(names)]
        arr = p.layers[name]
        j = int(rng.integers(arr.size))
        num = numeric_grad(f, arr, h=1e-7, index=j)
        errs.append(max_rel_error(grads[name].reshape(-1)[j], num, floor=1e-6))
    assert max(errs) <= 1e-4, errs


def test_backward_without_cache_errors(params):
    with pytest.raises(E.BackwardError):
        E.backward(params, None, np.zeros((1, 8)))


def test_head_gradients():
    rng = np.random.default_rng(4)
    head = E.init_head(8, 5, seed=1)
    emb = rng.normal(size=(3, 8))
    y = np.array([0, 4, 2])

    def f():
        return K.softmax_xent(E.head_logits(head, emb), y)[0]

    _, dlogits = K.softmax_xent(E.head_logits(head, emb), y)
    demb, g = E.head_backward(head, emb, dlogits)
    assert max_rel_error(demb, numeric_grad(f, emb)) <= 1e-4
    assert max_rel_error(g["head.w"], numeric_grad(f, head.w)) <= 1e-4
    assert max_rel_error(g["head.slopes"], numeric_grad(f, head.slopes)) <= 1e-4


def test_classify_outputs_distribution():
    head = E.init_head(8, 30, seed=0)
    probs = E.classify(np.random.default_rng(0).normal(size=8), head, n_classes=30)
    assert probs.shape == (30,)
    assert probs.sum() == pytest.approx(1.0)
    assert np.all(probs >= 0)
    with pytest.raises(K.ShapeError):
        E.classify(np.zeros(8), head, n_classes=29)


# -- model file -----------------------------------------------------------------

def test_save_load_round_trip(tmp_path, params):
    path = tmp_path / "m.jemb"
    E.save_model(params, path)
    back = E.load_model(path)
    assert back.k == 8 and back.head is None
    for name, arr in params.layers.items():
        np.testing.assert_array_equal(back.layers[name], arr)
    x = np.random.default_rng(5).random((48, 48))
    np.testing.assert_array_equal(E.embed(x, back), E.embed(x, params))


def test_round_trip_with_head(tmp_path):
    p = E.init_params(k=4, seed=2)
    p.head = E.init_head(4, 6, seed=2)
    E.save_model(p, tmp_path / "h.jemb")
    back = E.load_model(tmp_path / "h.jemb")
    np.testing.assert_array_equal(back.head.w, p.head.w)
    np.testing.assert_array_equal(back.head.slopes, p.head.slopes)


def test_header_layout(tmp_path, params):
    E.save_model(params, tmp_path / "m.jemb")
    buf = (tmp_path / "m.jemb").read_bytes()
    assert buf[:4] == b"JEMB"
    assert struct.unpack_from("<III", buf, 4) == (1, 8, 14)


@pytest.mark.parametrize("cut", [2, 10, 200, -8])
def test_truncated_file_rejected(tmp_path, params, cut):
    E.save_model(params, tmp_path / "m.jemb")
    buf = (tmp_path / "m.jemb").read_bytes()
    (tmp_path / "t.jemb").write_bytes(buf[:cut])
    with pytest.raises(E.ModelFileError):
        E.load_model(tmp_path / "t.jemb")


def test_bad_magic_and_version(tmp_path, params):
    E.save_model(params, tmp_path / "m.jemb")
    buf = bytearray((tmp_path / "m.jemb").read_bytes())
    (tmp_path / "x.jemb").write_bytes(b"XXXX" + bytes(buf[4:]))
    with pytest.raises(E.CorruptModelError):
        E.load_model(tmp_path / "x.jemb")
    buf[4:8] = struct.pack("<I", 2)
    (tmp_path / "v.jemb").write_bytes(bytes(buf))
    with pytest.raises(E.ModelVersionError):
        E.load_model(tmp_path / "v.jemb")


def test_trailing_bytes_rejected(tmp_path, params):
    E.save_model(params, tmp_path / "m.jemb")
    (tmp_path / "m.jemb").write_bytes((tmp_path / "m.jemb").read_bytes() + b"\0" * 8)
    with pytest.raises(E.ModelFileError):
        E.load_model(tmp_path / "m.jemb")
