import numpy as np
import pytest

from gradcheck import numeric_grad, rel_error, sample_positions
from lstm_stn import models
from lstm_stn.locnet import localize_sequence
from lstm_stn.models import ModelConfig, build_model, flatten, loss_and_backward
from lstm_stn.stn import affine_grid
from lstm_stn.tensor import make_rng

SEEDS = range(5)
TOL = 1e-4
MARGIN = 1e-3  # pixels; a 1e-5 parameter step moves samples by well under this


def grid_is_kink_free(grid, h, w):
    xp = (grid[..., 0] + 1) * (w - 1) / 2
    yp = (grid[..., 1] + 1) * (h - 1) / 2
    d = np.minimum(np.abs(xp - np.round(xp)), np.abs(yp - np.round(yp)))
    return d.min() > MARGIN


def sample_grids(model, x):
    cfg = model.config
    if cfg.kind == "lstm-stn-cnn":
        thetas, _ = localize_sequence(x, model.params["loc"], cfg.steps)
        return [affine_grid(thetas[:, t], cfg.glimpse, cfg.glimpse) for t in range(cfg.steps)]
    if cfg.kind == "ffn-stn-cnn":
        _, theta = model.transform(x)
        return [affine_grid(theta, *x.shape[-2:])]
    return []


def perturbed(cfg, seed):
    """Shrunken model moved off every kink: random biases, non-zero transform heads,
    and sample grids at least ``MARGIN`` pixels away from the integer lattice."""
    for attempt in range(100):
        rng = make_rng([seed, attempt])
        model = build_model(cfg)
        for name, arr in model.named_params().items():
            if name.endswith(".b") and ".lstm." not in name:
                arr += rng.normal(scale=0.1, size=arr.shape)
            if name == "loc.head.w":
                arr += rng.normal(scale=0.3, size=arr.shape)
            if name == "loc.head.b":
                arr += rng.normal(scale=0.05, size=arr.shape)
        x = rng.uniform(size=(2, 1, cfg.canvas, cfg.canvas))
        if all(grid_is_kink_free(g, cfg.canvas, cfg.canvas) for g in sample_grids(model, x)):
            labels = rng.integers(0, 10, size=(2, cfg.steps if cfg.kind == "lstm-stn-cnn" else 4))
            return model, x, labels
    raise AssertionError("no kink-free instance found")


def worst_param_error(model, x, labels, seed, train=False):
    """Largest relative error over sampled entries of every parameter tensor."""
    def loss():
        rng = make_rng(seed) if train else None
        return loss_and_backward(model, x, labels, train=train, rng=rng)[0]

    _, grads = loss_and_backward(model, x, labels, train=train,
                                 rng=make_rng(seed) if train else None)
    grads = dict(flatten(grads))
    params = model.named_params()
    assert set(grads) == set(params)
    pick = make_rng(seed + 100)
    worst = (0.0, "")
    for name, arr in params.items():
        idx = sample_positions(pick, arr.size, k=25)
        num = numeric_grad(loss, arr, index=idx).ravel()[idx]
        worst = max(worst, (rel_error(grads[name].ravel()[idx], num), name))
    return worst


def check_all_params(model, x, labels, seed, train=False):
    err, name = worst_param_error(model, x, labels, seed, train)
    assert err < TOL, f"{name}: relative error {err:.2e}"


@pytest.mark.parametrize("kind", ["lstm-stn-cnn", "ffn-stn-cnn", "cnn"])
@pytest.mark.parametrize("seed", SEEDS)
def test_shrunken_model_gradients(kind, seed):
    cfg = ModelConfig.shrunken(kind, seed=seed)
    check_all_params(*perturbed(cfg, seed), seed)


@pytest.mark.parametrize("seed", range(2))
def test_gradient_with_dropout_mask_fixed(seed):
    cfg = ModelConfig.shrunken("lstm-stn-cnn", seed=seed)
    check_all_params(*perturbed(cfg, seed), seed, train=True)


@pytest.mark.parametrize("d", [2, 3])
@pytest.mark.parametrize("seed", SEEDS)
def test_ffn_toy_20px(d, seed):
    cfg = ModelConfig.shrunken("ffn-stn-cnn", canvas=20, d=d, seed=seed)
    check_all_params(*perturbed(cfg, seed), seed)


def test_head_gradients_accumulate_linearly():
    cfg = ModelConfig.shrunken("lstm-stn-cnn", steps=4, seed=3)
    model, x, y = perturbed(cfg, 3)
    w = np.array([0.3, -1.2, 2.0, 0.5])
    parts = []
    for t in range(4):
        e = np.zeros(4)
        e[t] = 1.0
        parts.append(dict(flatten(loss_and_backward(model, x, y, train=False, head_weights=e)[1])))
    full = dict(flatten(loss_and_backward(model, x, y, train=False, head_weights=w)[1]))
    for name, g in full.items():
        np.testing.assert_allclose(g, sum(w[t] * parts[t][name] for t in range(4)),
                                   rtol=1e-9, atol=1e-12)


# ---------------------------------------------------------------- full-size behaviour


@pytest.fixture(scope="module")
def canvases(fake_pool):
    from lstm_stn.dataset import generate_split
    x, y = generate_split(fake_pool, "train", 100, 0).arrays()
    return x, y


def test_untrained_glimpses_are_identical(canvases):
    x, _ = canvases
    model = build_model(ModelConfig("lstm-stn-cnn"))
    views, thetas = model.glimpses(x[:4])
    assert views.shape == (4, 4, 1, 24, 24)
    for t in range(1, 4):
        assert np.array_equal(views[:, t], views[:, 0])
    logits, _ = model.forward(x[:4])
    assert np.array_equal(logits.argmax(-1), np.repeat(logits[:, :1].argmax(-1), 4, axis=1))


def test_untrained_loss_near_log10(canvases):
    x, y = canvases
    for kind in ("lstm-stn-cnn", "cnn"):
        loss, _ = models.evaluate(build_model(ModelConfig(kind)), x, y, batch_size=50)
        assert abs(loss - np.log(10)) < 0.05 * np.log(10), kind


def test_ffn_identity_transform_keeps_canvas(canvases):
    x, _ = canvases
    model = build_model(ModelConfig("ffn-stn-cnn", d=3))
    v, _ = model.transform(x[:2])
    assert np.max(np.abs(v - x[:2])) <= 1e-12
    logits, _ = model.forward(x[:2])
    assert logits.shape == (2, 4, 10)


@pytest.mark.parametrize("d,side", [(1, 48), (2, 24), (3, 16), (4, 12)])
def test_glimpse_resolution(d, side, canvases):
    model = build_model(ModelConfig("lstm-stn-cnn", d=d))
    views, _ = model.glimpses(canvases[0][:1])
    assert views.shape[-2:] == (side, side)


def test_config_errors():
    with pytest.raises(ValueError):
        build_model(ModelConfig("rnn"))
    with pytest.raises(ValueError):
        build_model(ModelConfig("lstm-stn-cnn", glimpse=50, d=3))


def test_same_seed_same_weights():
    a = build_model(ModelConfig.shrunken("cnn", seed=4)).named_params()
    b = build_model(ModelConfig.shrunken("cnn", seed=4)).named_params()
    assert all(np.array_equal(a[k], b[k]) for k in a)
