import numpy as np
import pytest

from iret.aggregate import AggregatorConfig
from iret.encoder import (
    AdamState,
    TrainConfig,
    adam_step,
    conv2d_backward,
    conv2d_forward,
    encode,
    encode_project,
    finetune_ap,
    forward,
    init_params,
    load_checkpoint,
    save_checkpoint,
    train_contrastive,
)
from iret.errors import DegenerateVectorError, FormatError, ShapeError
from iret.losses import quantized_ap_loss
from iret.seeding import generator
from iret.whiten import l2_normalize


def naive_conv(x, w, b, stride=2, pad=1):
    B, Cin, H, W = x.shape
    Cout, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    Ho = (H + 2 * pad - k) // stride + 1
    Wo = (W + 2 * pad - k) // stride + 1
    out = np.zeros((B, Cout, Ho, Wo))
    for n in range(B):
        for o in range(Cout):
            for i in range(Ho):
                for j in range(Wo):
                    acc = b[o]
                    for c in range(Cin):
                        for di in range(k):
                            for dj in range(k):
                                acc += w[o, c, di, dj] * xp[n, c, i * stride + di, j * stride + dj]
                    out[n, o, i, j] = acc
    return out


@pytest.fixture
def params():
    return init_params(generator(3, "test", "params"))


def test_conv_matches_naive(rng):
    x = rng.normal(size=(2, 3, 9, 8))
    w = rng.normal(size=(4, 3, 3, 3))
    b = rng.normal(size=4)
    out, _ = conv2d_forward(x, w, b)
    assert out.shape == (2, 4, 5, 4)
    np.testing.assert_allclose(out, naive_conv(x, w, b), atol=1e-10)


def test_conv_backward_is_adjoint(rng):
    # <conv(x), d> is linear in x and w, so its gradients are exact
    x = rng.normal(size=(2, 3, 8, 8))
    w = rng.normal(size=(5, 3, 3, 3))
    b = rng.normal(size=5)
    out, cache = conv2d_forward(x, w, b)
    d = rng.normal(size=out.shape)
    dx, dw, db = conv2d_backward(d, cache, w)
    ex = np.zeros_like(x)
    ex[1, 2, 3, 4] = 1.0
    assert (naive_conv(ex, w, np.zeros(5)) * d).sum() == pytest.approx(dx[1, 2, 3, 4], abs=1e-10)
    ew = np.zeros_like(w)
    ew[3, 1, 0, 2] = 1.0
    assert (naive_conv(x, ew, np.zeros(5)) * d).sum() == pytest.approx(dw[3, 1, 0, 2], abs=1e-10)
    np.testing.assert_allclose(db, d.sum(axis=(0, 2, 3)), atol=1e-12)


def test_encode_contract(params, rng):
    img = rng.uniform(size=(3, 32, 32))
    d = encode(params, img)
    assert d.shape == (16,)
    assert abs(np.linalg.norm(d) - 1.0) <= 1e-12
    z = encode_project(params, img)
    assert z.shape == (8,)
    assert abs(np.linalg.norm(z) - 1.0) <= 1e-12
    batch = encode(params, np.stack([img, img[:, ::-1]]))
    assert batch.shape == (2, 16)
    np.testing.assert_allclose(batch[0], d, atol=1e-14)


def test_encode_wrong_shape(params):
    with pytest.raises(ShapeError):
        encode(params, np.zeros((3, 16, 16)))


def test_encode_zero_image_is_degenerate(params):
    with pytest.raises(DegenerateVectorError):
        encode(params, np.zeros((3, 32, 32)))


def test_encode_deterministic(rng):
    img = rng.uniform(size=(3, 32, 32))
    a = encode(init_params(generator(3, "test", "params")), img)
    b = encode(init_params(generator(3, "test", "params")), img)
    assert a.tobytes() == b.tobytes()


@pytest.mark.parametrize("kind", ["MAC", "SPoC", "GeM"])
def test_encode_unit_norm_for_each_pooling(params, rng, kind):
    d = encode(params, rng.uniform(size=(4, 3, 32, 32)), AggregatorConfig(kind=kind))
    np.testing.assert_allclose(np.linalg.norm(d, axis=1), 1.0, atol=1e-12)


def test_identity_head(params, rng):
    params = dict(params, head_w1=np.eye(16), head_b1=np.zeros(16), head_w2=np.eye(16)[:8],
                  head_b2=np.zeros(8))
    img = rng.uniform(size=(3, 32, 32))
    _, cache = forward(params, img[None], AggregatorConfig(), head=True)
    u = cache["u"][0]
    if (u[:8] <= 0).all():
        pytest.skip("no positive entry to keep")
    expected = l2_normalize(np.maximum(u, 0)[:8])
    np.testing.assert_allclose(encode_project(params, img), expected, atol=1e-12)


def test_adam_first_step():
    p = {"w": np.array([0.5])}
    adam_step(AdamState(lr=1e-3), p, {"w": np.array([2.0])})
    assert p["w"][0] == pytest.approx(0.5 - 1e-3 * 2 / (2 + 1e-8), abs=1e-15)


def test_adam_zero_gradient():
    p = {"w": np.array([0.5, -1.0])}
    state = AdamState()
    adam_step(state, p, {"w": np.zeros(2)})
    np.testing.assert_array_equal(p["w"], [0.5, -1.0])
    assert state.t == 1


def test_adam_two_steps_hand_simulation():
    lr, b1, b2, eps, g = 1e-2, 0.9, 0.999, 1e-8, 0.3
    x = m = v = 0.0
    for t in (1, 2):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        x -= lr * (m / (1 - b1**t)) / ((v / (1 - b2**t)) ** 0.5 + eps)
    p = {"w": np.array([0.0])}
    state = AdamState(lr=lr)
    for _ in range(2):
        adam_step(state, p, {"w": np.array([g])})
    assert p["w"][0] == pytest.approx(x, abs=1e-15)


def test_adam_shape_mismatch():
    with pytest.raises(ShapeError):
        adam_step(AdamState(), {"w": np.zeros(2)}, {"w": np.zeros(3)})


@pytest.fixture(scope="module")
def tiny_set():
    rng = np.random.default_rng(0)
    return rng.uniform(size=(8, 3, 32, 32)), np.repeat(np.arange(4), 2)


def test_contrastive_one_step(tiny_set):
    images, _ = tiny_set
    cfg = TrainConfig(batch_size=4, steps=1, seed=2)
    p1, trace1 = train_contrastive(cfg, images)
    p2, trace2 = train_contrastive(cfg, images)
    assert len(trace1) == 1 and trace1 == trace2
    assert all(p1[k].tobytes() == p2[k].tobytes() for k in p1)


def test_finetune_one_step(tiny_set, params):
    images, labels = tiny_set
    cfg = TrainConfig(batch_size=8, steps=1, seed=2)
    p1, trace1 = finetune_ap(cfg, images, labels, params)
    p2, trace2 = finetune_ap(cfg, images, labels, params)
    assert len(trace1) == 1 and trace1 == trace2
    assert all(p1[k].tobytes() == p2[k].tobytes() for k in p1)
    # the head is not trained during fine-tuning
    assert all(np.array_equal(p1[k], params[k]) for k in params if k.startswith("head"))
    assert not np.array_equal(p1["conv1_w"], params["conv1_w"])


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(batch_size=3)
    with pytest.raises(ValueError):
        TrainConfig(steps=0)
    with pytest.raises(ValueError):
        TrainConfig(pooling=AggregatorConfig(kind="RMAC"))


def test_perfect_batch_has_low_loss_and_small_gradient(rng):
    labels = np.repeat(np.arange(4), 4)
    centers = np.eye(16)[:4]
    Z = l2_normalize(centers[labels] + 0.05 * rng.normal(size=(16, 16)))
    perfect = quantized_ap_loss(Z, labels)
    shuffled = quantized_ap_loss(Z, rng.permutation(labels))
    assert perfect.value <= 0.05
    assert np.linalg.norm(perfect.grad) < np.linalg.norm(shuffled.grad)


def test_checkpoint_roundtrip(tmp_path, params):
    path = tmp_path / "m.ckpt"
    save_checkpoint(params, path)
    back = load_checkpoint(path)
    assert list(back) == list(params)
    for k in params:
        np.testing.assert_array_equal(back[k], params[k].astype(np.float32))
    enc_only = {k: v for k, v in params.items() if not k.startswith("head")}
    save_checkpoint(enc_only, path)
    assert list(load_checkpoint(path)) == list(enc_only)
    raw = path.read_bytes()
    path.write_bytes(raw[:-4])
    with pytest.raises(FormatError):
        load_checkpoint(path)
