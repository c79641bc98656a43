"""
This is a chunk of scripts for a small differentiable network in numpy:
dense, relu, conv2d (3x3 valid, stride 1), maxpool2x2, softmax, dropout and
flatten layers, forward passes that expose every layer output, vector-Jacobian
products from any layer back to the input, and a momentum SGD trainer.

Arrays are float64 and batch-first, images are (N, C, H, W).
"""
import copy
import math
from dataclasses import dataclass, asdict

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import softmax
from tqdm import tqdm

from .errors import NumericError, ShapeError, TrainingError
from .internal_functions import _get_logger, _run_ordered

LAYER_KINDS = ('dense', 'relu', 'conv2d', 'maxpool2x2', 'softmax', 'dropout', 'flatten')


@dataclass(frozen=True)
class LayerSpec:
    """One entry of an architecture list.

    Attributes:
        kind (str): one of LAYER_KINDS.
        units (int): output units of a dense layer.
        filters (int): filter count of a conv2d layer.
        size (int): conv2d filter size (valid padding, stride 1).
        p (float): dropout probability in [0, 1).
    """
    kind: str
    units: int = None
    filters: int = None
    size: int = 3
    p: float = None

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ShapeError("unknown layer kind {!r}".format(self.kind))
        if self.kind == 'dense' and (self.units is None or self.units < 1):
            raise ShapeError("dense layer needs units >= 1")
        if self.kind == 'conv2d' and (self.filters is None or self.filters < 1 or self.size < 1):
            raise ShapeError("conv2d layer needs filters >= 1 and size >= 1")
        if self.kind == 'dropout' and (self.p is None or not 0.0 <= self.p < 1.0):
            raise ShapeError("dropout probability must lie in [0, 1)")

    @classmethod
    def from_dict(cls, entry):
        """Build from a config mapping such as {'kind': 'dense', 'units': 100}."""
        return cls(**entry)

    def to_dict(self):
        return {k: v for k, v in asdict(self).items() if v is not None}


@dataclass(frozen=True)
class TrainConfig:
    """Momentum SGD recipe.

    A learning rate of 0 is accepted and leaves the weights untouched.
    dropout, when set, overrides the probability of every dropout layer.
    """
    learning_rate: float = 0.1
    momentum: float = 0.9
    dropout: float = 0.5
    batch_size: int = 128
    epochs: int = 50
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate >= 0.0:
            raise ValueError("learning_rate must be >= 0")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.dropout is not None and not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")

    @classmethod
    def mnist_full(cls, seed=0):
        """lr 0.1, momentum 0.9, dropout 0.5, batch 128, 50 epochs."""
        return cls(0.1, 0.9, 0.5, 128, 50, seed)


class _Layer:
    kind = None
    params = ()

    def __init__(self, spec):
        self.spec = spec

    def output_shape(self, shape):
        return shape

    def forward(self, x, train=False, rng=None):
        raise NotImplementedError

    def backward(self, grad, cache):
        """Return (grad wrt input, dict of grads wrt params)."""
        raise NotImplementedError


class Dense(_Layer):
    kind = 'dense'
    params = ('W', 'b')

    def output_shape(self, shape):
        if len(shape) != 1:
            raise ShapeError("dense layer needs a flat input, got {}".format(shape))
        return (self.spec.units,)

    def init(self, shape, rng):
        limit = math.sqrt(6.0 / shape[0])
        self.W = rng.uniform(-limit, limit, size=(shape[0], self.spec.units))
        self.b = np.zeros(self.spec.units)

    def forward(self, x, train=False, rng=None):
        return x @ self.W + self.b, x

    def backward(self, grad, cache):
        return grad @ self.W.T, {'W': cache.T @ grad, 'b': grad.sum(axis=0)}


class ReLU(_Layer):
    kind = 'relu'

    def forward(self, x, train=False, rng=None):
        return np.maximum(x, 0.0), x

    def backward(self, grad, cache):
        return grad * (cache > 0.0), {}


class Conv2d(_Layer):
    kind = 'conv2d'
    params = ('W', 'b')

    def output_shape(self, shape):
        k = self.spec.size
        if len(shape) != 3 or shape[1] < k or shape[2] < k:
            raise ShapeError("conv2d {}x{} cannot take input shape {}".format(k, k, shape))
        return (self.spec.filters, shape[1] - k + 1, shape[2] - k + 1)

    def init(self, shape, rng):
        k = self.spec.size
        limit = math.sqrt(6.0 / (shape[0] * k * k))
        self.W = rng.uniform(-limit, limit, size=(self.spec.filters, shape[0], k, k))
        self.b = np.zeros(self.spec.filters)

    def forward(self, x, train=False, rng=None):
        k = self.spec.size
        windows = sliding_window_view(x, (k, k), axis=(2, 3))
        out = np.tensordot(windows, self.W, axes=([1, 4, 5], [1, 2, 3]))
        return out.transpose(0, 3, 1, 2) + self.b[None, :, None, None], x

    def backward(self, grad, cache):
        k = self.spec.size
        windows = sliding_window_view(cache, (k, k), axis=(2, 3))
        d_w = np.tensordot(grad, windows, axes=([0, 2, 3], [0, 2, 3]))
        d_b = grad.sum(axis=(0, 2, 3))
        padded = np.pad(grad, ((0, 0), (0, 0), (k - 1, k - 1), (k - 1, k - 1)))
        grad_windows = sliding_window_view(padded, (k, k), axis=(2, 3))
        d_x = np.tensordot(grad_windows, self.W[:, :, ::-1, ::-1], axes=([1, 4, 5], [0, 2, 3]))
        return d_x.transpose(0, 3, 1, 2), {'W': d_w, 'b': d_b}


class MaxPool2x2(_Layer):
    kind = 'maxpool2x2'

    def output_shape(self, shape):
        if len(shape) != 3 or shape[1] < 2 or shape[2] < 2:
            raise ShapeError("maxpool2x2 cannot take input shape {}".format(shape))
        return (shape[0], shape[1] // 2, shape[2] // 2)

    def forward(self, x, train=False, rng=None):
        n, c, h, w = x.shape
        h2, w2 = h // 2, w // 2
        blocks = x[:, :, :2 * h2, :2 * w2].reshape(n, c, h2, 2, w2, 2)
        blocks = blocks.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h2, w2, 4)
        # first maximum of each window takes the whole gradient
        index = np.argmax(blocks, axis=-1)[..., None]
        out = np.take_along_axis(blocks, index, axis=-1)[..., 0]
        return out, (x.shape, index)

    def backward(self, grad, cache):
        shape, index = cache
        n, c, h, w = shape
        h2, w2 = h // 2, w // 2
        blocks = np.zeros((n, c, h2, w2, 4))
        np.put_along_axis(blocks, index, grad[..., None], axis=-1)
        blocks = blocks.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        d_x = np.zeros(shape)
        d_x[:, :, :2 * h2, :2 * w2] = blocks.reshape(n, c, 2 * h2, 2 * w2)
        return d_x, {}


class Softmax(_Layer):
    kind = 'softmax'

    def output_shape(self, shape):
        if len(shape) != 1:
            raise ShapeError("softmax needs a flat input, got {}".format(shape))
        return shape

    def forward(self, x, train=False, rng=None):
        out = softmax(x, axis=-1)
        return out, out

    def backward(self, grad, cache):
        return cache * (grad - np.sum(grad * cache, axis=-1, keepdims=True)), {}


class Dropout(_Layer):
    kind = 'dropout'

    def __init__(self, spec):
        super().__init__(spec)
        self.p = spec.p

    def forward(self, x, train=False, rng=None):
        if not train or self.p == 0.0:
            return x, None
        # inverted dropout: evaluation needs no rescaling
        mask = (rng.random(x.shape) >= self.p) / (1.0 - self.p)
        return x * mask, mask

    def backward(self, grad, cache):
        if cache is None:
            return grad, {}
        return grad * cache, {}


class Flatten(_Layer):
    kind = 'flatten'

    def output_shape(self, shape):
        return (int(np.prod(shape)),)

    def forward(self, x, train=False, rng=None):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, grad, cache):
        return grad.reshape(cache), {}


_LAYER_CLASSES = {cls.kind: cls for cls in (Dense, ReLU, Conv2d, MaxPool2x2, Softmax, Dropout, Flatten)}


class Network:
    """A feed-forward stack of layers.

    Attributes:
        input_shape (tuple): per-sample input shape.
        layers (list): layer objects; layer i produces activation i.
        shapes (list of tuple): per-sample activation shape of every layer.
        history (list of float): mean training loss per epoch.
    """

    def __init__(self, input_shape, layers):
        self.input_shape = tuple(int(s) for s in input_shape)
        self.layers = list(layers)
        self.history = []
        shape = self.input_shape
        self.shapes = []
        for layer in self.layers:
            shape = layer.output_shape(shape)
            self.shapes.append(shape)

    @property
    def m(self):
        return len(self.layers)

    @property
    def specs(self):
        return [layer.spec for layer in self.layers]

    @property
    def logits_index(self):
        """Index of the pre-softmax class-score layer."""
        if self.layers and self.layers[-1].kind == 'softmax':
            return self.m - 2
        return self.m - 1

    @property
    def num_outputs(self):
        return self.shapes[-1][0]

    def default_taps(self, n=3):
        """The last n representation stages: logits plus the hidden relu
        outputs that follow dense layers, then pooling outputs."""
        logits = self.logits_index
        dense_relus = [i for i in range(logits)
                       if self.layers[i].kind == 'relu' and i > 0 and self.layers[i - 1].kind == 'dense']
        pools = [i for i in range(logits) if self.layers[i].kind == 'maxpool2x2']
        chosen = dense_relus[-(n - 1):] if n > 1 else []
        if len(chosen) < n - 1:
            chosen = pools[-(n - 1 - len(chosen)):] + chosen
        return tuple(sorted(set(chosen))) + (logits,)

    def _as_batch(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.shape == self.input_shape:
            return x[None], True
        if x.shape[1:] != self.input_shape:
            raise ShapeError("input shape {} does not match network input {}".format(x.shape, self.input_shape))
        return x, False

    def _forward(self, x, train=False, rng=None, upto=None):
        upto = self.m - 1 if upto is None else upto
        activations, caches = [], []
        for i, layer in enumerate(self.layers[:upto + 1]):
            x, cache = layer.forward(x, train, rng)
            if not np.all(np.isfinite(x)):
                raise NumericError("non-finite activation at layer {} ({})".format(i, layer.kind))
            activations.append(x)
            caches.append(cache)
        return activations, caches

    def vjp(self, x, cotangents):
        """Gradient wrt x of sum_i <cotangent_i, z_i> over tapped layers.

        Args:
            x (numpy.ndarray): one sample or a batch.
            cotangents (dict): layer id -> array shaped like that activation.

        Returns:
            numpy.ndarray: shaped like x.
        """
        batch, single = self._as_batch(x)
        for tap in cotangents:
            if not 0 <= tap < self.m:
                raise IndexError("layer id {} outside 0..{}".format(tap, self.m - 1))
        top = max(cotangents)
        activations, caches = self._forward(batch, upto=top)
        grad = np.zeros_like(activations[top])
        for i in range(top, -1, -1):
            if i in cotangents:
                cot = np.asarray(cotangents[i], dtype=np.float64)
                if single and cot.shape == self.shapes[i]:
                    cot = cot[None]
                if cot.shape != activations[i].shape:
                    raise ShapeError("cotangent shape {} does not match layer {} activation {}"
                                     .format(cot.shape, i, activations[i].shape))
                grad = grad + cot
            grad, _ = self.layers[i].backward(grad, caches[i])
        return grad[0] if single else grad

    def copy(self):
        return copy.deepcopy(self)

    def parameters(self):
        """(layer id, name, array) for every trainable array."""
        return [(i, name, getattr(layer, name))
                for i, layer in enumerate(self.layers) for name in layer.params]

    def to_state(self):
        meta = {'input_shape': list(self.input_shape),
                'layers': [spec.to_dict() for spec in self.specs],
                'history': [float(v) for v in self.history]}
        arrays = {'layer{}/{}'.format(i, name): value for i, name, value in self.parameters()}
        return meta, arrays

    @classmethod
    def from_state(cls, meta, arrays):
        layers = [_LAYER_CLASSES[entry['kind']](LayerSpec.from_dict(entry)) for entry in meta['layers']]
        net = cls(meta['input_shape'], layers)
        for i, layer in enumerate(net.layers):
            for name in layer.params:
                setattr(layer, name, np.array(arrays['layer{}/{}'.format(i, name)], dtype=np.float64))
        net.history = list(meta.get('history', []))
        return net


def build_network(input_shape, layer_specs, seed=0):
    """Build a network with fan-in scaled uniform weights and zero biases.

    Args:
        input_shape (tuple): per-sample input shape.
        layer_specs (list of LayerSpec or dict): the architecture.
        seed (int): initialization seed.

    Returns:
        Network: the initialized network.
    """
    rng = np.random.default_rng(seed)
    layers = []
    shape = tuple(input_shape)
    for spec in layer_specs:
        if isinstance(spec, dict):
            spec = LayerSpec.from_dict(spec)
        layer = _LAYER_CLASSES[spec.kind](spec)
        next_shape = layer.output_shape(shape)
        if hasattr(layer, 'init'):
            layer.init(shape, rng)
        layers.append(layer)
        shape = next_shape
    return Network(input_shape, layers)


def mnist_full_specs():
    """Conv 32/32/64/64 3x3, two 2x2 pools, two 200-unit dense, 10-way softmax."""
    return _cnn_specs((32, 32, 64, 64), 200, 10, 0.5)


def mnist_desk_specs():
    """Desk-scale MNIST CNN: filters 16/16/32/32 and dense 100/100."""
    return _cnn_specs((16, 16, 32, 32), 100, 10, 0.5)


def cifar_desk_specs():
    """Scaled-down CNN for 3x32x32 inputs (no batch normalization)."""
    return _cnn_specs((16, 16, 32, 32), 128, 10, 0.5)


def toy_mlp_specs(units=32, classes=3):
    """Two relu hidden layers for the bi-dimensional toy problem."""
    return [LayerSpec('dense', units=units), LayerSpec('relu'),
            LayerSpec('dense', units=units), LayerSpec('relu'),
            LayerSpec('dense', units=classes), LayerSpec('softmax')]


ARCHITECTURES = {'mnist_full': mnist_full_specs, 'mnist_desk': mnist_desk_specs,
                 'cifar_desk': cifar_desk_specs, 'toy_mlp': toy_mlp_specs}


def _cnn_specs(filters, units, classes, p):
    f1, f2, f3, f4 = filters
    return [LayerSpec('conv2d', filters=f1), LayerSpec('relu'),
            LayerSpec('conv2d', filters=f2), LayerSpec('relu'),
            LayerSpec('maxpool2x2'),
            LayerSpec('conv2d', filters=f3), LayerSpec('relu'),
            LayerSpec('conv2d', filters=f4), LayerSpec('relu'),
            LayerSpec('maxpool2x2'),
            LayerSpec('flatten'),
            LayerSpec('dense', units=units), LayerSpec('relu'), LayerSpec('dropout', p=p),
            LayerSpec('dense', units=units), LayerSpec('relu'), LayerSpec('dropout', p=p),
            LayerSpec('dense', units=classes), LayerSpec('softmax')]


def forward_all(net, x, train_mode=False, rng=None):
    """Every layer output for x.

    Args:
        net (Network): the network.
        x (numpy.ndarray): one sample or a batch.
        train_mode (bool): sample dropout masks (needs rng).
        rng (numpy.random.Generator): dropout randomness.

    Returns:
        list of numpy.ndarray: m activations, the last one the class scores.
    """
    batch, single = net._as_batch(x)
    if train_mode and rng is None:
        rng = np.random.default_rng()
    activations, _ = net._forward(batch, train_mode, rng)
    return [a[0] for a in activations] if single else activations


def vjp_to_input(net, tap_index, cotangent, x):
    """d(cotangent . z_tap)/dx in evaluation mode."""
    return net.vjp(x, {tap_index: cotangent})


def class_scores(net, x, layer=None, batch_size=256):
    """Activation of one layer (default: logits), computed in chunks."""
    batch, single = net._as_batch(x)
    layer = net.logits_index if layer is None else layer
    out = [net._forward(batch[i:i + batch_size], upto=layer)[0][layer]
           for i in range(0, len(batch), batch_size)]
    out = np.concatenate(out) if out else np.zeros((0,) + net.shapes[layer])
    return out[0] if single else out


def predict_classes(net, x, batch_size=256):
    """Undefended prediction in 1..c."""
    scores = class_scores(net, x, batch_size=batch_size)
    return np.argmax(scores, axis=-1) + 1


def loss_and_grads(net, x, labels, train_mode=False, rng=None):
    """Mean cross-entropy of softmax outputs and its parameter gradients.

    Args:
        net (Network): a network ending in softmax.
        x (numpy.ndarray): batch of inputs.
        labels (numpy.ndarray): labels in 1..c.

    Returns:
        (float, list of dict): loss and per-layer gradient dicts.
    """
    if net.layers[-1].kind != 'softmax':
        raise ShapeError("cross-entropy training needs a softmax output layer")
    activations, caches = net._forward(x, train_mode, rng)
    probs = activations[-1]
    n = x.shape[0]
    rows = np.arange(n)
    with np.errstate(divide='ignore'):
        loss = float(-np.mean(np.log(probs[rows, labels - 1])))
    # softmax and cross-entropy backpropagate jointly as (p - onehot) / n
    grad = probs.copy()
    grad[rows, labels - 1] -= 1.0
    grad /= n
    grads = [None] * net.m
    grads[-1] = {}
    for i in range(net.m - 2, -1, -1):
        grad, grads[i] = net.layers[i].backward(grad, caches[i])
    return loss, grads


def _chunk_grads(net, x, labels, seed_seq):
    rng = np.random.default_rng(seed_seq)
    loss, grads = loss_and_grads(net, x, labels, train_mode=True, rng=rng)
    return loss, grads, x.shape[0]


def train_sgd(net, train, cfg, n_workers=1, logger=None, progress=False):
    """Train a copy of net with minibatch momentum SGD on cross-entropy.

    With n_workers > 1 each minibatch is split into n_workers chunks whose
    gradients are reduced in chunk order, so results only depend on the
    worker count.

    Args:
        net (Network): initialized network ending in softmax.
        train (Dataset): training samples, labels in 1..c.
        cfg (TrainConfig): the recipe.
        n_workers (int): data-parallel chunks per minibatch.
        logger (logging.Logger): logger object to store logs.
        progress (bool): show a tqdm bar over epochs.

    Returns:
        Network: the trained copy, with history filled.
    """
    logger = _get_logger(logger)
    if len(train) == 0:
        raise ValueError("training set is empty")
    x_all = train.images()
    if x_all.shape[1:] != net.input_shape:
        raise ShapeError("dataset shape {} does not match network input {}".format(x_all.shape[1:], net.input_shape))
    if train.labels.max() > net.num_outputs:
        raise ValueError("labels go up to {} but the network has {} outputs"
                         .format(train.labels.max(), net.num_outputs))

    net = net.copy()
    net.history = []
    if cfg.dropout is not None:
        for layer in net.layers:
            if layer.kind == 'dropout':
                layer.spec = LayerSpec('dropout', p=cfg.dropout)
                layer.p = cfg.dropout
    velocity = {(i, name): np.zeros_like(value) for i, name, value in net.parameters()}
    rng = np.random.default_rng(cfg.seed)
    seeds = np.random.SeedSequence(cfg.seed)
    n = len(train)

    for epoch in tqdm(range(cfg.epochs), desc='train', disable=not progress):
        order = rng.permutation(n)
        total = 0.0
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            index = order[start:start + cfg.batch_size]
            chunks = [c for c in np.array_split(index, max(1, n_workers)) if len(c)]
            child_seeds = seeds.spawn(len(chunks))
            try:
                results = _run_ordered(_chunk_grads,
                                       [(net, x_all[c], train.labels[c], s) for c, s in zip(chunks, child_seeds)],
                                       n_workers)
            except NumericError as e:
                raise TrainingError("training diverged at epoch {} batch {}: {}".format(epoch, b, e),
                                    epoch=epoch, batch=b) from e
            loss = sum(r[0] * r[2] for r in results) / len(index)
            if not math.isfinite(loss):
                raise TrainingError("loss diverged at epoch {} batch {}".format(epoch, b), epoch=epoch, batch=b)
            total += loss * len(index)
            for i, name, value in net.parameters():
                g = sum(r[1][i][name] * (r[2] / len(index)) for r in results)
                v = velocity[(i, name)]
                v *= cfg.momentum
                v -= cfg.learning_rate * g
                value += v
                if not np.all(np.isfinite(value)):
                    raise TrainingError("parameter {} of layer {} diverged at epoch {} batch {}"
                                        .format(name, i, epoch, b), epoch=epoch, batch=b)
        net.history.append(total / n)
        logger.info("train_sgd: epoch {} mean loss {:.6f}".format(epoch + 1, net.history[-1]))
    return net
