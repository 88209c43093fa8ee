"""Neural-network layers with sketched forward/backward rules, hand-derived.

During training a sketch-enabled layer never multiplies X by W directly:
the input and the parameter matrix are both projected through the round's
sketch S and the layer computes (XS)(WS)^T.  The weight gradient that
leaves the layer is the sketched gamma = G^T (XS); the true gradient is
recoverable as gamma S^T.  At inference no sketching is applied.

The training walk consumes *already sketched* parameter matrices, so the
same code path serves the server (which sketches its true W) and a client
(which only ever holds the broadcast W-tilde).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .linalg import DimensionError, as_matrix, fold, rng_uniform, unfold
from .sketch import SketchMatrix, apply, apply_transpose, identity_sketch


# ------------------------------------------------------------------
# layer containers
# ------------------------------------------------------------------

class DenseLayer:
    kind = "dense"

    def __init__(self, w, bias, sketch_enabled=True):
        self.w = as_matrix(w)
        self.bias = np.asarray(bias, dtype=np.float64).reshape(-1)
        if self.bias.shape[0] != self.w.shape[0]:
            raise DimensionError("bias length must equal output dimension")
        self.sketch_enabled = bool(sketch_enabled)

    @property
    def d_out(self):
        return self.w.shape[0]

    @property
    def d_in(self):
        return self.w.shape[1]

    def descriptor(self):
        return ("dense", self.d_in, self.d_out, self.sketch_enabled)


class ConvLayer:
    """Valid (no padding), stride-1 convolution; w holds vectorized kernels."""
    kind = "conv"

    def __init__(self, w, bias, c_in, k, sketch_enabled=True):
        self.w = as_matrix(w)  # (c_out, c_in * k * k)
        self.bias = np.asarray(bias, dtype=np.float64).reshape(-1)
        self.c_in = int(c_in)
        self.k = int(k)
        if self.w.shape[1] != c_in * k * k:
            raise DimensionError("kernel matrix columns must equal c_in * k^2")
        if self.bias.shape[0] != self.w.shape[0]:
            raise DimensionError("bias length must equal output channels")
        self.sketch_enabled = bool(sketch_enabled)

    @property
    def c_out(self):
        return self.w.shape[0]

    @property
    def d_in(self):
        return self.w.shape[1]

    def descriptor(self):
        return ("conv", self.c_in, self.c_out, self.k, self.sketch_enabled)


class ReLU:
    kind = "relu"

    def descriptor(self):
        return ("relu",)


class MaxPool2:
    kind = "maxpool2"

    def descriptor(self):
        return ("maxpool2",)


class Flatten:
    kind = "flatten"

    def descriptor(self):
        return ("flatten",)


PARAM_KINDS = ("dense", "conv")


def init_dense(d_in, d_out, seed, sketch_enabled=True) -> DenseLayer:
    """Uniform init: weights +-sqrt(3)/sqrt(d_in), bias +-1/sqrt(d_in)."""
    bound = 1.0 / math.sqrt(d_in)
    state, wf = rng_uniform(seed, d_out * d_in, -bound * math.sqrt(3.0), bound * math.sqrt(3.0))
    _, bf = rng_uniform(state, d_out, -bound, bound)
    return DenseLayer(wf.reshape(d_out, d_in), bf, sketch_enabled)


def init_conv(c_in, c_out, k, seed, sketch_enabled=True) -> ConvLayer:
    """Uniform init: weights +-sqrt(6)/sqrt(c_in * k^2), bias +-1/sqrt(c_in * k^2)."""
    fan_in = c_in * k * k
    bound = 1.0 / math.sqrt(fan_in)
    state, wf = rng_uniform(seed, c_out * fan_in, -bound * math.sqrt(6.0), bound * math.sqrt(6.0))
    _, bf = rng_uniform(state, c_out, -bound, bound)
    return ConvLayer(wf.reshape(c_out, fan_in), bf, c_in, k, sketch_enabled)


# ------------------------------------------------------------------
# dense layer
# ------------------------------------------------------------------

@dataclass
class DenseCache:
    x_sketch: np.ndarray
    w_sketch: np.ndarray
    sketch: SketchMatrix


def sketched_dense_forward(x, w_sketch, bias, sk: SketchMatrix):
    """Training forward from a sketched weight matrix: z = (XS) Wsk^T + bias."""
    x_sketch = apply(x, sk)
    w_sketch = as_matrix(w_sketch)
    if w_sketch.shape[1] != sk.s:
        raise DimensionError(f"sketched weights have {w_sketch.shape[1]} columns, sketch s={sk.s}")
    z = x_sketch @ w_sketch.T + np.asarray(bias, dtype=np.float64)
    return z, DenseCache(x_sketch, w_sketch, sk)


def dense_forward(x, layer: DenseLayer, sketch: SketchMatrix | None = None):
    """Forward pass; sketch=None means inference (no sketching applied)."""
    x = as_matrix(x)
    if x.shape[1] != layer.d_in:
        raise DimensionError(f"input width {x.shape[1]} vs layer d_in {layer.d_in}")
    if sketch is None:
        return x @ layer.w.T + layer.bias, None
    if sketch.d != layer.d_in:
        raise DimensionError(f"sketch d={sketch.d} vs layer d_in {layer.d_in}")
    return sketched_dense_forward(x, apply(layer.w, sketch), layer.bias, sketch)


def dense_backward(g, cache: DenseCache):
    """Returns (gamma, grad_x, grad_bias); the weight gradient is gamma S^T."""
    g = as_matrix(g)
    if g.shape != (cache.x_sketch.shape[0], cache.w_sketch.shape[0]):
        raise DimensionError(f"upstream gradient shape {g.shape} does not match cache")
    gamma = g.T @ cache.x_sketch
    grad_x = apply_transpose(g @ cache.w_sketch, cache.sketch)
    grad_bias = g.sum(axis=0)
    return gamma, grad_x, grad_bias


def weight_grad_from_gamma(gamma, sk: SketchMatrix) -> np.ndarray:
    """Back-project a sketched weight gradient to full width: gamma S^T."""
    return apply_transpose(gamma, sk)


# ------------------------------------------------------------------
# convolutional layer
# ------------------------------------------------------------------

@dataclass
class ConvCache:
    p_sketch: np.ndarray
    w_sketch: np.ndarray
    sketch: SketchMatrix
    in_shape: tuple
    out_shape: tuple
    k: int


def _conv_shapes(x_shape, c_out, k):
    b, c, h, w = x_shape
    h1, w1 = h - k + 1, w - k + 1
    if h1 < 1 or w1 < 1:
        raise DimensionError(f"kernel {k} does not fit input {x_shape}")
    return (b, c_out, h1, w1)


def sketched_conv_forward(x, w_sketch, bias, c_in, k, sk: SketchMatrix):
    """Training forward: unfold to patches, sketch, multiply, reshape back."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    w_sketch = as_matrix(w_sketch)
    out_shape = _conv_shapes(x.shape, w_sketch.shape[0], k)
    b, c_out, h1, w1 = out_shape
    p_sketch = apply(unfold(x, k), sk)
    z = p_sketch @ w_sketch.T + np.asarray(bias, dtype=np.float64)
    y = z.reshape(b, h1 * w1, c_out).transpose(0, 2, 1).reshape(out_shape)
    return y, ConvCache(p_sketch, w_sketch, sk, x.shape, out_shape, k)


def conv_forward(x, layer: ConvLayer, sketch: SketchMatrix | None = None):
    x = np.ascontiguousarray(x, dtype=np.float64)
    if x.ndim != 4 or x.shape[1] != layer.c_in:
        raise DimensionError(f"expected (b, {layer.c_in}, h, w) input, got {x.shape}")
    if sketch is None:
        out_shape = _conv_shapes(x.shape, layer.c_out, layer.k)
        b, c_out, h1, w1 = out_shape
        z = unfold(x, layer.k) @ layer.w.T + layer.bias
        return z.reshape(b, h1 * w1, c_out).transpose(0, 2, 1).reshape(out_shape), None
    if sketch.d != layer.d_in:
        raise DimensionError(f"sketch d={sketch.d} vs kernel fan-in {layer.d_in}")
    return sketched_conv_forward(x, apply(layer.w, sketch), layer.bias,
                                 layer.c_in, layer.k, sketch)


def conv_backward(g, cache: ConvCache):
    """Returns (gamma, grad_x, grad_bias); gamma S^T is the kernel gradient."""
    g = np.ascontiguousarray(g, dtype=np.float64)
    if g.shape != cache.out_shape:
        raise DimensionError(f"gradient shape {g.shape} vs forward output {cache.out_shape}")
    b, c_out, h1, w1 = cache.out_shape
    g_flat = g.reshape(b, c_out, h1 * w1).transpose(0, 2, 1).reshape(b * h1 * w1, c_out)
    gamma = g_flat.T @ cache.p_sketch
    grad_p = apply_transpose(g_flat @ cache.w_sketch, cache.sketch)
    grad_x = fold(grad_p, cache.in_shape, cache.k)
    grad_bias = g_flat.sum(axis=0)
    return gamma, grad_x, grad_bias


# ------------------------------------------------------------------
# activations, pooling, losses
# ------------------------------------------------------------------

def relu(z):
    return np.maximum(z, 0.0)


def relu_backward(g, z):
    # subgradient at exactly 0 is 0
    return np.asarray(g) * (np.asarray(z) > 0.0)


def maxpool2(x):
    """2x2 max pooling, stride 2; ties go to the first entry in row-major scan."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    b, c, h, w = x.shape
    if h % 2 or w % 2:
        raise DimensionError(f"maxpool2 needs even spatial dims, got ({h}, {w})")
    win = x.reshape(b, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(b, c, h // 2, w // 2, 4)
    argmax = win.argmax(axis=-1)
    y = np.take_along_axis(win, argmax[..., None], axis=-1)[..., 0]
    return y, argmax


def maxpool2_backward(g, argmax, in_shape):
    b, c, h, w = in_shape
    g = np.ascontiguousarray(g, dtype=np.float64)
    win = np.zeros((b, c, h // 2, w // 2, 4), dtype=np.float64)
    np.put_along_axis(win, argmax[..., None], g[..., None], axis=-1)
    return win.reshape(b, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(in_shape)


def softmax_crossentropy(logits, labels):
    """Mean cross-entropy over the batch; returns (loss, d loss / d logits)."""
    z = as_matrix(logits)
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    b, k = z.shape
    if y.shape[0] != b:
        raise DimensionError("one label per row required")
    if y.min(initial=0) < 0 or y.max(initial=0) >= k:
        raise ValueError(f"labels must lie in [0, {k})")
    shifted = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    loss = float(np.mean(lse - shifted[np.arange(b), y]))
    p = np.exp(shifted - lse[:, None])
    p[np.arange(b), y] -= 1.0
    return loss, p / b


def sigmoid_bce(logits, labels):
    """Mean binary cross-entropy on sigmoid outputs, log-stabilized."""
    z = np.asarray(logits, dtype=np.float64).reshape(-1)
    y = np.asarray(labels, dtype=np.float64).reshape(-1)
    if z.shape != y.shape:
        raise DimensionError("one label per logit required")
    if not np.isin(y, (0.0, 1.0)).all():
        raise ValueError("binary labels must be 0 or 1")
    b = z.shape[0]
    softplus = np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))
    loss = float(np.mean(softplus - y * z))
    sig = np.empty_like(z)
    pos = z >= 0
    sig[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    sig[~pos] = ez / (1.0 + ez)
    return loss, ((sig - y) / b).reshape(-1, 1)


LOSSES = {"softmax_ce": softmax_crossentropy, "sigmoid_bce": sigmoid_bce}


# ------------------------------------------------------------------
# architecture walk (shared by server model and blind clients)
# ------------------------------------------------------------------

def forward_inference(arch, params, x):
    """Run the layer stack without sketching. params: [(w, bias)] per param layer."""
    p = 0
    for item in arch:
        kind = item[0]
        if kind == "dense":
            w, bias = params[p]
            p += 1
            x = as_matrix(x) @ w.T + bias
        elif kind == "conv":
            _, c_in, c_out, k, _ = item
            w, bias = params[p]
            p += 1
            x, _ = conv_forward(x, ConvLayer(w, bias, c_in, k))
        elif kind == "relu":
            x = relu(x)
        elif kind == "maxpool2":
            x, _ = maxpool2(x)
        elif kind == "flatten":
            x = np.ascontiguousarray(x).reshape(x.shape[0], -1)
        else:
            raise ValueError(f"unknown layer kind {kind!r}")
    return x


def forward_train(arch, sketched_params, sketches, x):
    """Training forward from sketched parameters.

    sketched_params: [(w_sketch, bias)] per param layer, where w_sketch has
    the matching sketch's column count (full width under an identity
    sketch).  Returns (output, caches) with one cache per arch item.
    """
    caches = []
    p = 0
    for item in arch:
        kind = item[0]
        if kind == "dense":
            w_sk, bias = sketched_params[p]
            x, cache = sketched_dense_forward(x, w_sk, bias, sketches[p])
            caches.append(cache)
            p += 1
        elif kind == "conv":
            _, c_in, c_out, k, _ = item
            w_sk, bias = sketched_params[p]
            x, cache = sketched_conv_forward(x, w_sk, bias, c_in, k, sketches[p])
            caches.append(cache)
            p += 1
        elif kind == "relu":
            caches.append(x)
            x = relu(x)
        elif kind == "maxpool2":
            shape = x.shape
            x, argmax = maxpool2(x)
            caches.append((argmax, shape))
        elif kind == "flatten":
            caches.append(x.shape)
            x = np.ascontiguousarray(x).reshape(x.shape[0], -1)
        else:
            raise ValueError(f"unknown layer kind {kind!r}")
    return x, caches


def backward_train(arch, caches, grad_out):
    """Backward pass over forward_train caches.

    Returns ([(gamma, grad_bias)] per param layer, grad wrt the input).
    """
    grads = []
    g = grad_out
    for item, cache in zip(reversed(arch), reversed(caches)):
        kind = item[0]
        if kind == "dense":
            gamma, g, grad_bias = dense_backward(g, cache)
            grads.append((gamma, grad_bias))
        elif kind == "conv":
            gamma, g, grad_bias = conv_backward(g, cache)
            grads.append((gamma, grad_bias))
        elif kind == "relu":
            g = relu_backward(g, cache)
        elif kind == "maxpool2":
            argmax, shape = cache
            g = maxpool2_backward(g, argmax, shape)
        elif kind == "flatten":
            g = np.ascontiguousarray(g).reshape(cache)
    grads.reverse()
    return grads, g


class Model:
    """A layer stack plus its loss; parameters live only here (server side)."""

    def __init__(self, layers, loss="softmax_ce"):
        if loss not in LOSSES:
            raise ValueError(f"unknown loss {loss!r}")
        self.layers = list(layers)
        self.loss = loss

    def param_layers(self):
        return [ly for ly in self.layers if ly.kind in PARAM_KINDS]

    def architecture(self):
        """Weight-free structural description, safe to share with clients."""
        return tuple(ly.descriptor() for ly in self.layers)

    def params(self):
        return [(ly.w, ly.bias) for ly in self.param_layers()]

    def forward(self, x):
        return forward_inference(self.architecture(), self.params(), x)

    def layer_sketches(self, specs):
        """Resolve one sketch per param layer from generated specs, or identities."""
        from .sketch import generate
        out = []
        for ly, spec in zip(self.param_layers(), specs):
            out.append(identity_sketch(ly.d_in) if spec is None else generate(spec))
        return out

    def train_grads(self, x, labels, sketches):
        """Loss and per-layer (gamma, grad_bias) with the given per-layer sketches."""
        sketched = [(apply(ly.w, sk), ly.bias)
                    for ly, sk in zip(self.param_layers(), sketches)]
        out, caches = forward_train(self.architecture(), sketched, sketches, x)
        loss, g = LOSSES[self.loss](out, labels)
        grads, _ = backward_train(self.architecture(), caches, g)
        return loss, grads

    def identity_sketches(self):
        return [identity_sketch(ly.d_in) for ly in self.param_layers()]
