"""The three compared architectures.

``LstmStnCnn``
    recurrent localization net -> per-step affine grid -> bilinear glimpse
    (48x48) -> box down-sampling by ``d`` -> shared glimpse classifier, one
    digit per step.
``FfnStnCnn``
    feed-forward localization net -> one transform of the whole canvas ->
    down-sampling -> ``PlainCnn`` classifier with four heads.
``PlainCnn``
    conv 96@3x3 -> pool -> dropout -> FC-400 -> four softmax heads.

Every model keeps its weights in ``self.params``, a nested dict of float64
arrays, and exposes ``forward`` / ``backward`` over batches of canvases
shaped ``(N, 1, H, W)``.  Logits are ``(N, 4, 10)``; head t reads the t-th
digit along the baseline.
"""
from dataclasses import asdict, dataclass

import numpy as np

from . import layers
from .downsample import (avg_downsample, avg_downsample_backward, crop_padding,
                         pad_to_multiple)
from .locnet import (conv_stack_params, extract_features, extract_features_backward,
                     feature_dim, identity_head, localize_sequence,
                     localize_sequence_backward, locnet_params)
from .stn import affine_grid, affine_grid_backward, bilinear_sample, bilinear_sample_backward
from .tensor import DTYPE, make_rng, relu

N_HEADS = 4
N_CLASSES = 10


@dataclass
class ModelConfig:
    kind: str = "lstm-stn-cnn"  # or "ffn-stn-cnn", "cnn"
    d: int = 2
    canvas: int = 100
    glimpse: int = 48
    steps: int = N_HEADS
    hidden: int = 256
    loc_filters: int = 20
    loc_layers: int = 4
    cls_filters: int = 32
    cnn_filters: int = 96
    fc: int = 400
    keep: float = 0.5
    seed: int = 0

    @classmethod
    def shrunken(cls, kind, **kw):
        """Tiny variant used by gradient checks and quick tests."""
        base = dict(kind=kind, d=2, canvas=16, glimpse=8, steps=2, hidden=8, loc_filters=2,
                    loc_layers=2, cls_filters=2, cnn_filters=2, fc=6)
        base.update(kw)
        return cls(**base)


# ---------------------------------------------------------------- tree helpers


def flatten(tree, prefix=""):
    """Yield ``(dotted_name, array)`` for every leaf, in a stable order."""
    if isinstance(tree, dict):
        for k in sorted(tree):
            yield from flatten(tree[k], f"{prefix}{k}.")
    elif isinstance(tree, list):
        for i, v in enumerate(tree):
            yield from flatten(v, f"{prefix}{i}.")
    else:
        yield prefix[:-1], tree


def tree_map(fn, tree):
    if isinstance(tree, dict):
        return {k: tree_map(fn, v) for k, v in tree.items()}
    if isinstance(tree, list):
        return [tree_map(fn, v) for v in tree]
    return fn(tree)


# ---------------------------------------------------------------- classifier


def classifier_params(rng, side, filters, fc, heads):
    pooled = filters * (side // 2) ** 2
    return {"conv": layers.conv_params(rng, 1, filters),
            "fc": layers.dense_params(rng, pooled, fc),
            "heads": [layers.dense_params(rng, fc, N_CLASSES) for _ in range(heads)]}


def classifier_forward(x, p, keep, rng=None, train=False):
    """conv -> ReLU -> maxpool -> dropout -> FC -> ReLU -> heads; returns ``(N, heads, 10)``."""
    xc = layers.to_cnhw(x)
    a, cols = layers.conv_cnhw_forward(xc, p["conv"])
    np.maximum(a, 0.0, out=a)
    pooled, arg = layers.maxpool2_forward(a)
    flat = np.swapaxes(pooled, 0, 1).reshape(len(x), -1)
    dropped, mask = layers.dropout_forward(flat, keep, rng, train)
    hidden = relu(layers.dense_forward(dropped, p["fc"]))
    logits = np.stack([layers.dense_forward(hidden, h) for h in p["heads"]], axis=1)
    return logits, (xc.shape, cols, a, arg, pooled.shape, dropped, mask, hidden)


def classifier_backward(cache, p, grad_logits, need_input_grad=True):
    xshape, cols, a, arg, pshape, dropped, mask, hidden = cache
    gh = 0.0
    head_grads = []
    for k, h in enumerate(p["heads"]):
        g, hg = layers.dense_backward(hidden, h, grad_logits[:, k])
        gh = gh + g
        head_grads.append(hg)
    gh = layers.relu_backward(hidden, gh)
    gd, fc_grads = layers.dense_backward(dropped, p["fc"], gh)
    gflat = layers.dropout_backward(mask, gd)
    c, n, h2, w2 = pshape
    ga = layers.maxpool2_backward(a.shape, arg, layers.to_cnhw(gflat.reshape(n, c, h2, w2)))
    ga *= a > 0
    gx, conv_grads = layers.conv_cnhw_backward(cols, xshape, p["conv"], ga,
                                               need_dx=need_input_grad)
    if gx is not None:
        gx = layers.to_cnhw(gx)
    return gx, {"conv": conv_grads, "fc": fc_grads, "heads": head_grads}


# ---------------------------------------------------------------- models


class Model:
    config: ModelConfig
    params: dict

    def forward(self, x, train=False, rng=None):
        raise NotImplementedError

    def backward(self, cache, grad_logits):
        raise NotImplementedError

    def named_params(self):
        return dict(flatten(self.params))


class LstmStnCnn(Model):
    def __init__(self, config):
        if config.glimpse % config.d:
            raise ValueError(f"d={config.d} must divide the glimpse size {config.glimpse}")
        self.config = config
        rng = make_rng(config.seed)
        self.params = {
            "loc": locnet_params(rng, config.canvas, config.hidden, config.loc_filters,
                                 config.loc_layers),
            "cls": classifier_params(rng, config.glimpse // config.d, config.cls_filters,
                                     config.fc, 1),
        }

    def glimpses(self, x):
        """Down-sampled glimpses ``(N, steps, 1, g/d, g/d)`` and the transforms."""
        thetas, _ = localize_sequence(x, self.params["loc"], self.config.steps)
        g = self.config.glimpse
        views = [avg_downsample(bilinear_sample(x, affine_grid(thetas[:, t], g, g)), self.config.d)
                 for t in range(self.config.steps)]
        return np.stack(views, axis=1), thetas

    def forward(self, x, train=False, rng=None):
        cfg = self.config
        n, g = len(x), cfg.glimpse
        thetas, loc_cache = localize_sequence(x, self.params["loc"], cfg.steps)
        grids, views = [], []
        for t in range(cfg.steps):
            grid = affine_grid(thetas[:, t], g, g)
            grids.append(grid)
            views.append(avg_downsample(bilinear_sample(x, grid), cfg.d))
        views = np.stack(views, axis=1)  # N, T, 1, s, s
        flat = views.reshape((n * cfg.steps,) + views.shape[2:])
        logits, cls_cache = classifier_forward(flat, self.params["cls"], cfg.keep, rng, train)
        logits = logits.reshape(n, cfg.steps, N_CLASSES)
        return logits, (x, loc_cache, grids, cls_cache, views.shape)

    def backward(self, cache, grad_logits):
        cfg = self.config
        x, loc_cache, grids, cls_cache, vshape = cache
        n, g = len(x), cfg.glimpse
        gl = grad_logits.reshape(n * cfg.steps, 1, N_CLASSES)
        gviews, cls_grads = classifier_backward(cls_cache, self.params["cls"], gl)
        gviews = gviews.reshape(vshape)
        grad_thetas = np.zeros((n, cfg.steps, 2, 3), dtype=DTYPE)
        for t in range(cfg.steps):
            gsample = avg_downsample_backward(gviews[:, t], cfg.d)
            _, ggrid = bilinear_sample_backward(x, grids[t], gsample)
            grad_thetas[:, t] = affine_grid_backward(ggrid, g, g)
        loc_grads, _ = localize_sequence_backward(loc_cache, self.params["loc"], grad_thetas,
                                                  need_input_grad=False)
        return {"loc": loc_grads, "cls": cls_grads}


class PlainCnn(Model):
    def __init__(self, config):
        self.config = config
        rng = make_rng(config.seed)
        self.params = {"cls": classifier_params(rng, config.canvas, config.cnn_filters,
                                                config.fc, N_HEADS)}

    def forward(self, x, train=False, rng=None):
        logits, cache = classifier_forward(x, self.params["cls"], self.config.keep, rng, train)
        return logits, cache

    def backward(self, cache, grad_logits):
        _, grads = classifier_backward(cache, self.params["cls"], grad_logits,
                                       need_input_grad=False)
        return {"cls": grads}


class FfnStnCnn(Model):
    def __init__(self, config):
        self.config = config
        rng = make_rng(config.seed)
        side = -(-config.canvas // config.d)  # ceil: padded when d does not divide
        self.params = {
            "loc": {"conv": conv_stack_params(rng, config.loc_layers, config.loc_filters),
                    "head": identity_head(feature_dim(config.canvas, config.loc_layers,
                                                      config.loc_filters))},
            "cls": classifier_params(rng, side, config.cnn_filters, config.fc, N_HEADS),
        }

    def transform(self, x):
        feats, _ = extract_features(x, self.params["loc"]["conv"])
        theta = layers.dense_forward(feats, self.params["loc"]["head"]).reshape(-1, 2, 3)
        h, w = x.shape[-2:]
        return bilinear_sample(x, affine_grid(theta, h, w)), theta

    def forward(self, x, train=False, rng=None):
        cfg = self.config
        h, w = x.shape[-2:]
        feats, fcache = extract_features(x, self.params["loc"]["conv"])
        theta = layers.dense_forward(feats, self.params["loc"]["head"]).reshape(-1, 2, 3)
        grid = affine_grid(theta, h, w)
        v = bilinear_sample(x, grid)
        vp, offset = pad_to_multiple(v, cfg.d)
        small = avg_downsample(vp, cfg.d)
        logits, cls_cache = classifier_forward(small, self.params["cls"], cfg.keep, rng, train)
        return logits, (x, fcache, feats, grid, vp.shape, offset, cls_cache)

    def backward(self, cache, grad_logits):
        cfg = self.config
        x, fcache, feats, grid, vpshape, offset, cls_cache = cache
        h, w = x.shape[-2:]
        gsmall, cls_grads = classifier_backward(cls_cache, self.params["cls"], grad_logits)
        gv = crop_padding(avg_downsample_backward(gsmall, cfg.d, vpshape), x.shape, offset)
        _, ggrid = bilinear_sample_backward(x, grid, gv)
        gtheta = affine_grid_backward(ggrid, h, w).reshape(len(x), 6)
        gfeats, head_grads = layers.dense_backward(feats, self.params["loc"]["head"], gtheta)
        _, conv_grads = extract_features_backward(fcache, self.params["loc"]["conv"], gfeats,
                                                  need_input_grad=False)
        return {"loc": {"conv": conv_grads, "head": head_grads}, "cls": cls_grads}


MODEL_KINDS = {"lstm-stn-cnn": LstmStnCnn, "ffn-stn-cnn": FfnStnCnn, "cnn": PlainCnn}


def build_model(config):
    try:
        return MODEL_KINDS[config.kind](config)
    except KeyError:
        raise ValueError(f"unknown model kind {config.kind!r}") from None


def config_dict(model):
    return asdict(model.config)


# ---------------------------------------------------------------- training helpers


def loss_and_backward(model, x, labels, train=True, rng=None, head_weights=None):
    """Mean cross-entropy over the batch and all heads, and its gradients.

    ``head_weights`` (length 4) scales each head's contribution; it exists
    to check that head gradients accumulate linearly.
    """
    labels = np.asarray(labels)
    logits, cache = model.forward(x, train=train, rng=rng)
    n, t = logits.shape[:2]
    loss, probs = layers.softmax_xent_forward(logits.reshape(n * t, -1), labels.reshape(-1))
    g = layers.softmax_xent_backward(probs, labels.reshape(-1)).reshape(logits.shape)
    if head_weights is not None:
        g = g * np.asarray(head_weights, dtype=DTYPE)[None, :, None]
    return loss, model.backward(cache, g)


def predict(model, x, batch_size=200):
    out = []
    for i in range(0, len(x), batch_size):
        logits, _ = model.forward(x[i:i + batch_size], train=False)
        out.append(logits.argmax(axis=-1))
    return np.concatenate(out) if out else np.zeros((0, N_HEADS), dtype=np.int64)


def evaluate(model, x, labels, batch_size=200):
    """Mean loss and per-digit error (wrong digits / (4 * examples))."""
    labels = np.asarray(labels)
    total, wrong = 0.0, 0
    for i in range(0, len(x), batch_size):
        logits, _ = model.forward(x[i:i + batch_size], train=False)
        y = labels[i:i + batch_size]
        n = len(y)
        loss, _ = layers.softmax_xent_forward(logits.reshape(n * N_HEADS, -1), y.reshape(-1))
        total += loss * n
        wrong += int((logits.argmax(axis=-1) != y).sum())
    count = max(len(x), 1)
    return total / count, wrong / (N_HEADS * count)


def per_digit_error(model, x, labels, batch_size=200):
    return evaluate(model, x, labels, batch_size)[1]
