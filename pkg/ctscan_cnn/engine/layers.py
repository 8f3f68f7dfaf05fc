"""Layer kernels and the composed classifier.

Each layer has a ``*_forward`` returning ``(output, LayerCache)`` and a
``*_backward`` consuming the upstream gradient and that cache. Conventions:

  - convolution: valid padding, stride 1, computed as im2col + matmul
  - max-pool: square window with stride equal to the window, floor mode,
    ties resolved to the first row-major maximum
  - ReLU derivative at exactly 0 is 0

The default chain (64×64 input) is

    conv 16@3×3 + ReLU → pool → conv 32@3×3 + ReLU → pool → conv 64@5×5 + ReLU
    → pool → flatten(1600) → dense 260 + ReLU → dense 4 → softmax

Every layer but the head carries a ReLU.

Kernel sizes follow from the feature-map sizes 64→62, 31→29, 14→10. The
260→4 head sits between the 260-unit layer and softmax because a softmax
over 260 units cannot produce four class probabilities.
"""

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from ..errors import NumericInputError, ShapeError
from .tensor import as_shape4, col2im, conv_output_size, im2col, matmul

ModelParams = Dict[str, np.ndarray]

# Per-sample output shapes of the default chain, layer by layer.
REFERENCE_SHAPE_CHAIN: List[Tuple[int, ...]] = [
    (16, 62, 62), (16, 31, 31),
    (32, 29, 29), (32, 14, 14),
    (64, 10, 10), (64, 5, 5),
    (1600,), (260,), (4,), (4,),
]


# ── Layer parameter holders ──────────────────────────────────────────────

@dataclass
class ConvLayer:
    weights: np.ndarray         # [filters, in_c, kh, kw]
    bias: np.ndarray            # [filters]

    def __post_init__(self):
        if self.weights.ndim != 4 or self.bias.shape != (self.weights.shape[0],):
            raise ShapeError(
                f"conv weights {list(self.weights.shape)} / bias {list(self.bias.shape)} inconsistent"
            )

    @property
    def filters(self) -> int:
        return self.weights.shape[0]

    @property
    def kernel(self) -> Tuple[int, int]:
        return self.weights.shape[2], self.weights.shape[3]


@dataclass
class DenseLayer:
    weights: np.ndarray         # [in_dim, out_dim]
    bias: np.ndarray            # [out_dim]

    def __post_init__(self):
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[1],):
            raise ShapeError(
                f"dense weights {list(self.weights.shape)} / bias {list(self.bias.shape)} inconsistent"
            )

    @property
    def in_dim(self) -> int:
        return self.weights.shape[0]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[1]


@dataclass
class LayerCache:
    """Forward values a backward pass needs."""
    kind: str
    input_shape: Tuple[int, ...]
    output_shape: Tuple[int, ...]
    saved: Dict[str, np.ndarray] = field(default_factory=dict)


def _check_upstream(dy: np.ndarray, cache: LayerCache, kind: str) -> None:
    if cache.kind != kind:
        raise ShapeError(f"{kind} backward given a {cache.kind} cache")
    if tuple(dy.shape) != cache.output_shape:
        raise ShapeError(
            f"{kind} upstream gradient {list(dy.shape)} does not match "
            f"forward output {list(cache.output_shape)}"
        )


# ── Convolution ──────────────────────────────────────────────────────────

def conv2d_forward(x: np.ndarray, layer: ConvLayer) -> Tuple[np.ndarray, LayerCache]:
    """``y[b,f,i,j] = bias[f] + Σ_{c,u,v} x[b,c,i+u,j+v]·w[f,c,u,v]``."""
    n, c, h, w = as_shape4(x)
    kh, kw = layer.kernel
    if c != layer.weights.shape[1]:
        raise ShapeError(f"conv expects {layer.weights.shape[1]} input channels, got {c}")
    if kh > h or kw > w:
        raise ShapeError(f"conv kernel {kh}x{kw} exceeds input {h}x{w}")

    oh, ow = conv_output_size(h, kh), conv_output_size(w, kw)
    cols = im2col(x, kh, kw)
    w2 = layer.weights.reshape(layer.filters, -1)
    y = matmul(w2, cols) + layer.bias[:, None]
    y = y.reshape(layer.filters, n, oh, ow).transpose(1, 0, 2, 3)
    y = np.ascontiguousarray(y)
    return y, LayerCache("conv", x.shape, y.shape, {"cols": cols})


def conv2d_backward(dy: np.ndarray, cache: LayerCache,
                    layer: ConvLayer) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return ``(dx, dweights, dbias)``."""
    _check_upstream(dy, cache, "conv")
    if dy.shape[1] != layer.filters:
        raise ShapeError(f"conv cache has {dy.shape[1]} filters, layer has {layer.filters}")
    kh, kw = layer.kernel
    dy2 = dy.transpose(1, 0, 2, 3).reshape(layer.filters, -1)
    w2 = layer.weights.reshape(layer.filters, -1)

    dweights = matmul(dy2, cache.saved["cols"].T).reshape(layer.weights.shape)
    dbias = dy2.sum(axis=1)
    dcols = matmul(w2.T, dy2)
    dx = col2im(dcols, cache.input_shape, kh, kw)
    return dx, dweights, dbias


# ── Max pooling ──────────────────────────────────────────────────────────

def maxpool_forward(x: np.ndarray, size: int = 2,
                    stride: int = 2) -> Tuple[np.ndarray, LayerCache]:
    n, c, h, w = as_shape4(x)
    if size != stride:
        raise ShapeError(f"pooling window {size} must equal stride {stride}")
    if h < size or w < size:
        raise ShapeError(f"pool window {size}x{size} larger than input {h}x{w}")

    oh, ow = h // size, w // size
    windows = (x[:, :, :oh * size, :ow * size]
               .reshape(n, c, oh, size, ow, size)
               .transpose(0, 1, 2, 4, 3, 5)
               .reshape(n, c, oh, ow, size * size))
    # np.argmax returns the first maximum, i.e. row-major within the window
    argmax = np.argmax(windows, axis=-1)
    y = np.take_along_axis(windows, argmax[..., None], axis=-1)[..., 0]
    return y, LayerCache("maxpool", x.shape, y.shape, {"argmax": argmax, "size": np.array(size)})


def maxpool_backward(dy: np.ndarray, cache: LayerCache) -> np.ndarray:
    _check_upstream(dy, cache, "maxpool")
    size = int(cache.saved["size"])
    n, c, oh, ow = dy.shape
    routed = np.zeros((n, c, oh, ow, size * size), dtype=dy.dtype)
    np.put_along_axis(routed, cache.saved["argmax"][..., None], dy[..., None], axis=-1)
    routed = (routed.reshape(n, c, oh, ow, size, size)
              .transpose(0, 1, 2, 4, 3, 5)
              .reshape(n, c, oh * size, ow * size))
    dx = np.zeros(cache.input_shape, dtype=dy.dtype)
    dx[:, :, :oh * size, :ow * size] = routed
    return dx


# ── Elementwise / reshaping ──────────────────────────────────────────────

def relu(x: np.ndarray) -> Tuple[np.ndarray, LayerCache]:
    mask = x > 0
    y = np.where(mask, x, 0).astype(x.dtype, copy=False)
    return y, LayerCache("relu", x.shape, y.shape, {"mask": mask})


def relu_backward(dy: np.ndarray, cache: LayerCache) -> np.ndarray:
    _check_upstream(dy, cache, "relu")
    return np.where(cache.saved["mask"], dy, 0).astype(dy.dtype, copy=False)


def flatten_forward(x: np.ndarray) -> Tuple[np.ndarray, LayerCache]:
    y = x.reshape(x.shape[0], -1)
    return y, LayerCache("flatten", x.shape, y.shape)


def flatten_backward(dy: np.ndarray, cache: LayerCache) -> np.ndarray:
    _check_upstream(dy, cache, "flatten")
    return dy.reshape(cache.input_shape)


# ── Dense ────────────────────────────────────────────────────────────────

def dense_forward(x: np.ndarray, layer: DenseLayer) -> Tuple[np.ndarray, LayerCache]:
    """``y = x·W + b`` per row."""
    if x.ndim != 2 or x.shape[1] != layer.in_dim:
        raise ShapeError(f"dense expects [n,{layer.in_dim}] input, got {list(x.shape)}")
    y = matmul(x, layer.weights) + layer.bias
    return y, LayerCache("dense", x.shape, y.shape, {"x": x})


def dense_backward(dy: np.ndarray, cache: LayerCache,
                   layer: DenseLayer) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return ``(dx, dW, db)``."""
    _check_upstream(dy, cache, "dense")
    if cache.input_shape[1] != layer.in_dim or dy.shape[1] != layer.out_dim:
        raise ShapeError("dense cache does not match layer dimensions")
    dW = matmul(cache.saved["x"].T, dy)
    db = dy.sum(axis=0)
    dx = matmul(dy, layer.weights.T)
    return dx, dW, db


# ── Softmax ──────────────────────────────────────────────────────────────

def softmax(z: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max subtraction."""
    if z.ndim != 2 or z.shape[1] < 2:
        raise ShapeError(f"softmax expects [n,k] logits with k >= 2, got {list(z.shape)}")
    if not np.all(np.isfinite(z)):
        raise NumericInputError("softmax input contains NaN or infinite logits")
    shifted = z - z.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def softmax_backward(dp: np.ndarray, p: np.ndarray) -> np.ndarray:
    """Gradient wrt logits given the gradient wrt probabilities."""
    if dp.shape != p.shape:
        raise ShapeError(f"softmax gradient {list(dp.shape)} does not match output {list(p.shape)}")
    return p * (dp - np.sum(dp * p, axis=1, keepdims=True))


# ── Model specification ──────────────────────────────────────────────────

@dataclass(frozen=True)
class ConvSpec:
    name: str
    filters: int
    kernel: Tuple[int, int]
    relu: bool = True


@dataclass(frozen=True)
class PoolSpec:
    name: str
    size: int = 2


@dataclass(frozen=True)
class FlattenSpec:
    name: str = "flatten"


@dataclass(frozen=True)
class DenseSpec:
    name: str
    units: int
    relu: bool


@dataclass(frozen=True)
class SoftmaxSpec:
    name: str = "softmax"


LayerSpec = Union[ConvSpec, PoolSpec, FlattenSpec, DenseSpec, SoftmaxSpec]


@dataclass(frozen=True)
class ModelSpec:
    """Ordered layer chain plus the per-sample input shape ``(c, h, w)``."""
    input_shape: Tuple[int, int, int]
    layers: Tuple[LayerSpec, ...]

    @property
    def num_classes(self) -> int:
        return self.shape_trace()[-1][1][0]

    def shape_trace(self) -> List[Tuple[str, Tuple[int, ...]]]:
        """Per-sample output shape of every layer, in order."""
        shape: Tuple[int, ...] = tuple(self.input_shape)
        trace = []
        for spec in self.layers:
            shape = _layer_output_shape(spec, shape)
            trace.append((spec.name, shape))
        return trace

    def param_shapes(self) -> Dict[str, Tuple[int, ...]]:
        """Ordered ``name -> shape`` of every learnable tensor."""
        shapes: Dict[str, Tuple[int, ...]] = {}
        shape: Tuple[int, ...] = tuple(self.input_shape)
        for spec in self.layers:
            if isinstance(spec, ConvSpec):
                shapes[f"{spec.name}.weight"] = (spec.filters, shape[0]) + tuple(spec.kernel)
                shapes[f"{spec.name}.bias"] = (spec.filters,)
            elif isinstance(spec, DenseSpec):
                shapes[f"{spec.name}.weight"] = (shape[0], spec.units)
                shapes[f"{spec.name}.bias"] = (spec.units,)
            shape = _layer_output_shape(spec, shape)
        return shapes


def _layer_output_shape(spec: LayerSpec, shape: Tuple[int, ...]) -> Tuple[int, ...]:
    if isinstance(spec, ConvSpec):
        if len(shape) != 3:
            raise ShapeError(f"{spec.name}: convolution needs a [c,h,w] input, got {shape}")
        c, h, w = shape
        kh, kw = spec.kernel
        if kh > h or kw > w:
            raise ShapeError(f"{spec.name}: kernel {kh}x{kw} exceeds input {h}x{w}")
        return (spec.filters, h - kh + 1, w - kw + 1)
    if isinstance(spec, PoolSpec):
        if len(shape) != 3 or shape[1] < spec.size or shape[2] < spec.size:
            raise ShapeError(f"{spec.name}: pool window {spec.size} does not fit input {shape}")
        c, h, w = shape
        return (c, h // spec.size, w // spec.size)
    if isinstance(spec, FlattenSpec):
        return (int(np.prod(shape)),)
    if isinstance(spec, DenseSpec):
        if len(shape) != 1:
            raise ShapeError(f"{spec.name}: dense layer needs a flat input, got {shape}")
        return (spec.units,)
    if isinstance(spec, SoftmaxSpec):
        if len(shape) != 1 or shape[0] < 2:
            raise ShapeError(f"{spec.name}: softmax needs at least 2 logits, got {shape}")
        return shape
    raise ShapeError(f"unknown layer spec {spec!r}")


def build_model_spec(in_channels: int = 1,
                     input_size: int = 64,
                     conv_filters: Sequence[int] = (16, 32, 64),
                     conv_kernels: Sequence[int] = (3, 3, 5),
                     dense_units: Sequence[int] = (260,),
                     num_classes: int = 4) -> ModelSpec:
    """Build a ReLU conv/pool stack, hidden ReLU dense layers and a softmax head.

    The defaults give the 64×64 chain; the result is validated through
    :meth:`ModelSpec.shape_trace`.
    """
    if len(conv_filters) != len(conv_kernels):
        raise ShapeError("conv_filters and conv_kernels must have the same length")
    layers: List[LayerSpec] = []
    for i, (filters, k) in enumerate(zip(conv_filters, conv_kernels), start=1):
        layers.append(ConvSpec(f"conv{i}", int(filters), (int(k), int(k))))
        layers.append(PoolSpec(f"pool{i}", 2))
    layers.append(FlattenSpec())
    for i, units in enumerate(dense_units, start=1):
        layers.append(DenseSpec(f"dense{i}", int(units), relu=True))
    layers.append(DenseSpec("head", int(num_classes), relu=False))
    layers.append(SoftmaxSpec())

    spec = ModelSpec((int(in_channels), int(input_size), int(input_size)), tuple(layers))
    spec.shape_trace()
    return spec


def reference_model_spec(in_channels: int = 1) -> ModelSpec:
    """The default 64×64 four-class chain, with its shape chain asserted."""
    spec = build_model_spec(in_channels=in_channels)
    shapes = [shape for _, shape in spec.shape_trace()]
    if shapes != REFERENCE_SHAPE_CHAIN:
        raise ShapeError(f"default chain drifted: {shapes}")
    return spec


# ── Composed forward / backward ──────────────────────────────────────────

def _conv_layer(params: ModelParams, name: str) -> ConvLayer:
    return ConvLayer(params[f"{name}.weight"], params[f"{name}.bias"])


def _dense_layer(params: ModelParams, name: str) -> DenseLayer:
    return DenseLayer(params[f"{name}.weight"], params[f"{name}.bias"])


def check_params(params: ModelParams, spec: ModelSpec) -> None:
    expected = spec.param_shapes()
    if list(params) != list(expected):
        raise ShapeError(f"parameter names {list(params)} do not match model {list(expected)}")
    for name, shape in expected.items():
        if tuple(params[name].shape) != shape:
            raise ShapeError(f"{name}: shape {list(params[name].shape)}, expected {list(shape)}")


def model_forward(params: ModelParams, x: np.ndarray,
                  spec: Optional[ModelSpec] = None) -> Tuple[np.ndarray, List[LayerCache]]:
    """Run the chain on ``x [n,c,h,w]``; return class probabilities and caches.

    Every layer's output shape is checked against :meth:`ModelSpec.shape_trace`.
    """
    spec = spec or reference_model_spec()
    n, c, h, w = as_shape4(x)
    if (c, h, w) != tuple(spec.input_shape):
        raise ShapeError(f"model expects [n,{','.join(map(str, spec.input_shape))}] input, "
                         f"got {list(x.shape)}")
    dtype = next(iter(params.values())).dtype
    out = np.asarray(x, dtype=dtype)

    caches: List[LayerCache] = []
    for layer_spec, (name, expected) in zip(spec.layers, spec.shape_trace()):
        if isinstance(layer_spec, ConvSpec):
            out, cache = conv2d_forward(out, _conv_layer(params, layer_spec.name))
            if layer_spec.relu:
                out, relu_cache = relu(out)
                cache.saved["relu"] = relu_cache.saved["mask"]
        elif isinstance(layer_spec, PoolSpec):
            out, cache = maxpool_forward(out, layer_spec.size, layer_spec.size)
        elif isinstance(layer_spec, FlattenSpec):
            out, cache = flatten_forward(out)
        elif isinstance(layer_spec, DenseSpec):
            out, cache = dense_forward(out, _dense_layer(params, layer_spec.name))
            if layer_spec.relu:
                out, relu_cache = relu(out)
                cache.saved["relu"] = relu_cache.saved["mask"]
        else:
            out = softmax(out)
            cache = LayerCache("softmax", out.shape, out.shape, {"probs": out})

        if tuple(out.shape[1:]) != expected:
            raise ShapeError(f"{name}: produced {list(out.shape[1:])}, expected {list(expected)}")
        caches.append(cache)
    return out, caches


def model_backward(params: ModelParams, caches: List[LayerCache], upstream: np.ndarray,
                   spec: Optional[ModelSpec] = None, fused: bool = True) -> ModelParams:
    """Gradients for every parameter, keyed like ``params``.

    With ``fused=True`` ``upstream`` is the gradient wrt the pre-softmax
    logits (as returned by the cross-entropy loss); otherwise it is the
    gradient wrt the probabilities and is pushed through softmax first.
    """
    spec = spec or reference_model_spec()
    if len(caches) != len(spec.layers):
        raise ShapeError(f"{len(caches)} caches for a {len(spec.layers)}-layer model")
    check_params(params, spec)

    grads: ModelParams = {}
    grad = upstream
    for layer_spec, cache in zip(reversed(spec.layers), reversed(caches)):
        if isinstance(layer_spec, SoftmaxSpec):
            if tuple(grad.shape) != cache.output_shape:
                raise ShapeError(f"upstream gradient {list(grad.shape)} does not match "
                                 f"model output {list(cache.output_shape)}")
            if not fused:
                grad = softmax_backward(grad, cache.saved["probs"])
        elif isinstance(layer_spec, DenseSpec):
            if layer_spec.relu:
                grad = np.where(cache.saved["relu"], grad, 0).astype(grad.dtype, copy=False)
            layer = _dense_layer(params, layer_spec.name)
            grad, grads[f"{layer_spec.name}.weight"], grads[f"{layer_spec.name}.bias"] = \
                dense_backward(grad, cache, layer)
        elif isinstance(layer_spec, FlattenSpec):
            grad = flatten_backward(grad, cache)
        elif isinstance(layer_spec, PoolSpec):
            grad = maxpool_backward(grad, cache)
        else:
            if layer_spec.relu:
                grad = np.where(cache.saved["relu"], grad, 0).astype(grad.dtype, copy=False)
            layer = _conv_layer(params, layer_spec.name)
            grad, grads[f"{layer_spec.name}.weight"], grads[f"{layer_spec.name}.bias"] = \
                conv2d_backward(grad, cache, layer)

    return {name: grads[name] for name in params}
