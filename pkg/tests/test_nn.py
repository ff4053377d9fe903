import numpy as np
import pytest

from sbaudit import nn
from sbaudit.synthgen import GenConfig, Label, balanced_counts, generate


def _with_params(model, **changes):
    params = [p.copy() for p in model.params()]
    for idx, fn in changes.items():
        params[int(idx[1:])] = fn(params[int(idx[1:])])
    return nn.MiniPadNet.from_params(params)


def zero_bias(model):
    return _with_params(model, **{f"p{i}": np.zeros_like for i in (1, 3, 5, 7)})


@pytest.fixture(scope="module")
def small_data():
    return generate(GenConfig(seed=11, counts=balanced_counts(8), noise_sigma=0.2))


def test_init_is_deterministic():
    assert nn.init_model(7).equals(nn.init_model(7))


def test_init_depends_on_seed():
    assert not nn.init_model(7).equals(nn.init_model(8))


def test_init_shapes_and_bounds():
    model = nn.init_model(123)
    convs = [layer for layer in model.layers if layer.kind == "conv"]
    assert [l.weight.shape for l in convs] == [(8, 1, 3, 3), (16, 8, 3, 3), (32, 16, 3, 3)]
    assert model.layers[3].weight.shape == (1, 32)
    for layer in model.layers:
        fan_in = int(np.prod(layer.weight.shape[1:]))
        bound = np.sqrt(6.0 / fan_in)
        for p in layer.params:
            assert np.all(np.abs(p) <= bound)
    assert model.target_layer_id == 2


def test_parameters_are_read_only():
    model = nn.init_model(1)
    with pytest.raises(ValueError):
        model.layers[0].weight[0, 0, 0, 0] = 1.0


def test_wrong_architecture_rejected():
    params = nn.init_model(1).params()
    params[0] = np.zeros((4, 1, 3, 3))
    with pytest.raises(nn.ShapeError):
        nn.MiniPadNet.from_params(params)


def test_zero_image_zero_bias_gives_half():
    model = zero_bias(nn.init_model(5))
    cache = nn.forward(model, np.zeros((1, 32, 32)))
    assert cache.logit == 0.0
    assert cache.score == 0.5


def test_forward_cache_contents():
    cache = nn.forward(nn.init_model(5), np.full((1, 32, 32), 0.3))
    assert cache.outputs["conv1"].shape == (8, 32, 32)
    assert cache.outputs["pool1"].shape == (8, 16, 16)
    assert cache.outputs["conv2"].shape == (16, 16, 16)
    assert cache.outputs["pool2"].shape == (16, 8, 8)
    assert cache.target.shape == (32, 8, 8)
    assert np.isfinite(cache.logit)


def test_target_activations_non_negative():
    rng = np.random.default_rng(0)
    for seed in range(5):
        cache = nn.forward(nn.init_model(seed), rng.random((1, 32, 32)))
        assert cache.target.min() >= 0.0


def test_shape_mismatch_rejected():
    with pytest.raises(nn.ShapeError):
        nn.forward(nn.init_model(0), np.zeros((32, 32)))
    with pytest.raises(nn.ShapeError):
        nn.forward_batch(nn.init_model(0), np.zeros((2, 3, 32, 32)))


def test_hand_computed_toy_network():
    # identity 3x3 kernels on channel 0 of every conv, head reads channel 0 only
    model = nn.init_model(0)
    params = [np.zeros_like(p) for p in model.params()]
    for w in (0, 2, 4):
        params[w][0, 0, 1, 1] = 1.0
    params[6][0, 0] = 1.0
    params[7][0] = 0.5
    toy = nn.MiniPadNet.from_params(params)
    image = np.zeros((1, 32, 32))
    image[0, 0, 0] = 0.8
    image[0, 0, 1] = 0.2
    image[0, 5, 5] = 0.4
    image[0, 31, 31] = 1.0
    # two 2x2 max-pools = max over 4x4 blocks: 0.8, 0.4 and 1.0 survive
    # logit = (0.8 + 0.4 + 1.0) / 64 + 0.5
    assert nn.forward(toy, image).logit == pytest.approx(0.534375, abs=1e-15)


def test_backward_matches_finite_differences():
    rng = np.random.default_rng(1)
    eps = 1e-4
    for seed in range(3):
        model = nn.init_model(seed)
        cache = nn.forward(model, rng.random((1, 32, 32)))
        grad = nn.backward_to_layer(model, cache, 1)
        acts = cache.target
        fd = np.empty_like(acts)
        for idx in np.ndindex(acts.shape):
            up, down = acts.copy(), acts.copy()
            up[idx] += eps
            down[idx] -= eps
            fd[idx] = (nn.head_logit(model, up) - nn.head_logit(model, down)) / (2 * eps)
        rel = np.abs(grad - fd) / np.maximum(np.abs(fd), 1e-12)
        assert rel.max() < 1e-5


def test_backward_analytic_form_and_sign_flip():
    model = nn.init_model(3)
    cache = nn.forward(model, np.full((1, 32, 32), 0.5))
    plus = nn.backward_to_layer(model, cache, 1)
    minus = nn.backward_to_layer(model, cache, -1)
    assert np.array_equal(minus, -plus)
    expected = model.layers[3].weight[0][:, None, None] / 64
    assert np.array_equal(plus, np.broadcast_to(expected, (32, 8, 8)))


def test_backward_rejects_foreign_cache():
    cache = nn.forward(nn.init_model(1), np.zeros((1, 32, 32)))
    with pytest.raises(nn.ModelMismatchError):
        nn.backward_to_layer(nn.init_model(2), cache, 1)
    with pytest.raises(ValueError):
        nn.backward_to_layer(nn.init_model(1), cache, 0)


def test_parameter_gradients_match_finite_differences(small_data):
    model = nn.init_model(4)
    images, labels = small_data.images[:6], small_data.labels[:6]
    _, grads = nn.loss_and_grads(model, images, labels)
    rng = np.random.default_rng(2)
    eps = 1e-6
    for pidx in range(8):
        base = [p.copy() for p in model.params()]
        for _ in range(3):
            flat = rng.integers(base[pidx].size)
            idx = np.unravel_index(flat, base[pidx].shape)
            up = [p.copy() for p in base]
            down = [p.copy() for p in base]
            up[pidx][idx] += eps
            down[pidx][idx] -= eps
            lu = nn.loss_and_grads(nn.MiniPadNet.from_params(up), images, labels)[0]
            ld = nn.loss_and_grads(nn.MiniPadNet.from_params(down), images, labels)[0]
            fd = (lu - ld) / (2 * eps)
            assert grads[pidx][idx] == pytest.approx(fd, rel=1e-4, abs=1e-8)


def test_batched_scores_independent_of_executor(small_data):
    from concurrent.futures import ThreadPoolExecutor

    model = nn.init_model(6)
    serial = nn.score_images(model, small_data.images)
    with ThreadPoolExecutor(4) as ex:
        threaded = nn.score_images(model, small_data.images, ex)
    assert serial.tobytes() == threaded.tobytes()


def test_train_zero_epochs_returns_input(small_data):
    model = nn.init_model(1)
    out = nn.train(model, small_data, nn.TrainConfig(epochs=0))
    assert out.equals(model)


def test_train_is_deterministic(small_data):
    cfg = nn.TrainConfig(epochs=2, batch_size=8, seed=3)
    a = nn.train(nn.init_model(1), small_data, cfg)
    b = nn.train(nn.init_model(1), small_data, cfg)
    assert a.equals(b)
    assert not a.equals(nn.init_model(1))


def test_gradient_clipping_bounds_step(small_data):
    model = nn.init_model(1)
    one_step = dict(epochs=1, batch_size=len(small_data), momentum=0.0, learning_rate=0.1)
    clipped = nn.train(model, small_data, nn.TrainConfig(grad_clip=1e-3, **one_step))
    step = np.sqrt(sum(np.sum((a - b) ** 2) for a, b in zip(clipped.params(), model.params())))
    assert step == pytest.approx(0.1 * 1e-3, rel=1e-9)
    free = nn.train(model, small_data, nn.TrainConfig(grad_clip=0.0, **one_step))
    _, grads = nn.loss_and_grads(model, small_data.images, small_data.labels)
    for p0, p1, g in zip(model.params(), free.params(), grads):
        assert np.allclose(p1, p0 - 0.1 * g, rtol=0, atol=1e-15)


def test_train_rejects_single_label(small_data):
    from sbaudit.synthgen import split_by

    only_attack = split_by(small_data, label=Label.ATTACK)
    with pytest.raises(ValueError, match="both"):
        nn.train(nn.init_model(1), only_attack, nn.TrainConfig(epochs=1))


@pytest.mark.parametrize("bad", [dict(epochs=-1), dict(batch_size=0), dict(learning_rate=0.0),
                                 dict(momentum=1.0), dict(momentum=-0.1),
                                 dict(grad_clip=-1.0)])
def test_train_config_validation(bad):
    with pytest.raises(ValueError):
        nn.TrainConfig(**bad)


def test_weight_file_round_trip(tmp_path, small_data):
    model = nn.train(nn.init_model(2), small_data, nn.TrainConfig(epochs=1, batch_size=8))
    path = tmp_path / "m.sbaw"
    nn.save_model(model, path)
    assert path.read_bytes()[:4] == b"SBAW"
    assert nn.load_model(path).equals(model)


def test_weight_file_truncated(tmp_path):
    blob = nn.dump_model(nn.init_model(2))
    for cut in (3, 8, 20, len(blob) - 1):
        with pytest.raises(nn.WeightFormatError):
            nn.parse_model(blob[:cut])


def test_weight_file_bad_magic():
    blob = nn.dump_model(nn.init_model(2))
    with pytest.raises(nn.WeightFormatError, match="unrecognized format"):
        nn.parse_model(b"XXXX" + blob[4:])


def test_weight_file_version_mismatch():
    blob = bytearray(nn.dump_model(nn.init_model(2)))
    blob[4:6] = (99).to_bytes(2, "little")
    with pytest.raises(nn.WeightFormatError, match="version"):
        nn.parse_model(bytes(blob))
