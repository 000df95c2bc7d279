"""Multiscale convolutional embedding network with exact numpy gradients.

An input image runs through a full-resolution convolutional path and one or
more shallower low-resolution paths; every path output is L2-normalized and
the normalized vectors are combined by a linear embedding into the final
d-dimensional space. All layers implement exact forward/backward passes so
analytic gradients can be checked against finite differences.

Architectures are declared in a flat INI-style text (one section per path);
checkpoints store a JSON header (config hash, dims) followed by the raw
little-endian float32 parameter arrays in declared order.
"""

import configparser
import hashlib
import io
import json
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "MultiscaleConfig",
    "MultiscaleNet",
    "default_config_text",
    "parse_net_config",
    "canonical_config_text",
    "config_hash",
    "save_checkpoint",
    "load_checkpoint",
    "downsample",
    "local_norm_forward",
]

_ACTIVATIONS = ("relu", "none")


def downsample(tensor, factor):
    """Average-pool the spatial dims by an integer factor (1 = identity)."""
    factor = int(factor)
    if factor < 1:
        raise ValueError(f"downsample factor must be >= 1, got {factor}")
    if factor == 1:
        return tensor
    h, w = tensor.shape[-2:]
    if h % factor or w % factor:
        raise ValueError(f"factor {factor} does not divide spatial dims {(h, w)}")
    lead = tensor.shape[:-2]
    blocks = tensor.reshape(lead + (h // factor, factor, w // factor, factor))
    return blocks.mean(axis=(-3, -1), dtype=np.float64).astype(tensor.dtype)


def _box_sum(x, radius):
    """Sum of each clipped (2*radius+1)^2 window, via integral images (float64)."""
    h, w = x.shape[-2:]
    cs = np.cumsum(np.cumsum(x, axis=-2, dtype=np.float64), axis=-1, dtype=np.float64)
    cs = np.pad(cs, [(0, 0)] * (x.ndim - 2) + [(1, 0), (1, 0)])
    r0 = np.clip(np.arange(h) - radius, 0, h)
    r1 = np.clip(np.arange(h) + radius + 1, 0, h)
    c0 = np.clip(np.arange(w) - radius, 0, w)
    c1 = np.clip(np.arange(w) + radius + 1, 0, w)
    return (
        cs[..., r1[:, None], c1[None, :]]
        - cs[..., r0[:, None], c1[None, :]]
        - cs[..., r1[:, None], c0[None, :]]
        + cs[..., r0[:, None], c0[None, :]]
    )


def _box_counts(h, w, radius):
    r0 = np.clip(np.arange(h) - radius, 0, h)
    r1 = np.clip(np.arange(h) + radius + 1, 0, h)
    c0 = np.clip(np.arange(w) - radius, 0, w)
    c1 = np.clip(np.arange(w) + radius + 1, 0, w)
    return ((r1 - r0)[:, None] * (c1 - c0)[None, :]).astype(np.float64)


def local_norm_forward(feature_map, window, epsilon):
    """Center and scale each value by its clipped spatial window, per channel.

    output = (x - window_mean) / (L2 norm of the centered window + epsilon)
    """
    if window < 1 or window % 2 == 0:
        raise ValueError(f"window must be odd and >= 1, got {window}")
    h, w = feature_map.shape[-2:]
    if window > h or window > w:
        raise ValueError(f"window {window} exceeds feature-map extent {(h, w)}")
    out, _ = _local_norm_with_cache(feature_map, window, epsilon)
    return out


def _local_norm_with_cache(x, window, epsilon):
    radius = window // 2
    h, w = x.shape[-2:]
    x64 = x.astype(np.float64, copy=False)
    n = _box_counts(h, w, radius)
    s1 = _box_sum(x64, radius)
    s2 = _box_sum(x64 * x64, radius)
    mean = s1 / n
    ssq = np.maximum(s2 - s1 * s1 / n, 0.0)
    norm = np.sqrt(ssq)
    denom = norm + epsilon
    out = ((x64 - mean) / denom).astype(x.dtype)
    return out, (x64, mean, norm, denom, n, radius)


def _local_norm_backward(g, cache):
    x64, mean, norm, denom, n, radius = cache
    g64 = g.astype(np.float64, copy=False)
    term1 = g64 / denom
    term2 = _box_sum(g64 / (denom * n), radius)
    safe_norm = np.where(norm > 0.0, norm, 1.0)
    c = np.where(norm > 0.0, g64 * (x64 - mean) / (denom * denom * safe_norm), 0.0)
    term3 = x64 * _box_sum(c, radius) - _box_sum(c * mean, radius)
    return (term1 - term2 - term3).astype(g.dtype)


def _he_std(fan_in, activation):
    return np.sqrt((2.0 if activation == "relu" else 1.0) / fan_in)


class Conv:
    """Valid 2-D convolution over (N, C, H, W) with optional ReLU."""

    def __init__(self, kernels, size, stride=1, activation="relu"):
        if kernels < 1 or size < 1 or stride < 1:
            raise ValueError("conv kernels, size and stride must be >= 1")
        if activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.kernels = kernels
        self.size = size
        self.stride = stride
        self.activation = activation
        self.in_shape = None

    def trace(self, in_shape):
        if len(in_shape) != 3:
            raise ValueError(f"conv expects a (C, H, W) input, got {in_shape}")
        c, h, w = in_shape
        if self.size > h or self.size > w:
            raise ValueError(f"conv size {self.size} exceeds input extent {(h, w)}")
        self.in_shape = in_shape
        ho = (h - self.size) // self.stride + 1
        wo = (w - self.size) // self.stride + 1
        return (self.kernels, ho, wo)

    def param_shapes(self):
        c = self.in_shape[0]
        return [(self.kernels, c, self.size, self.size), (self.kernels,)]

    def init_params(self, views, rng):
        weight, bias = views
        c = self.in_shape[0]
        weight[...] = rng.normal(
            scale=_he_std(c * self.size * self.size, self.activation), size=weight.shape
        )
        bias[...] = 0.0

    def forward(self, x, params, mode, rng):
        weight, bias = params
        windows = sliding_window_view(x, (self.size, self.size), axis=(2, 3))
        windows = windows[:, :, :: self.stride, :: self.stride]
        n, _, ho, wo = windows.shape[:4]
        # materialize im2col once; backward reuses it for the weight gradient
        cols = np.ascontiguousarray(windows.transpose(0, 2, 3, 1, 4, 5)).reshape(
            n * ho * wo, -1
        )
        w_mat = weight.reshape(self.kernels, -1)
        pre = (cols @ w_mat.T).reshape(n, ho, wo, self.kernels)
        pre = np.ascontiguousarray(pre.transpose(0, 3, 1, 2))
        pre += bias[None, :, None, None]
        if self.activation == "relu":
            return np.maximum(pre, 0.0), (cols, x.shape, (ho, wo), pre > 0.0)
        return pre, (cols, x.shape, (ho, wo), None)

    def backward(self, g, cache, params):
        weight, _ = params
        cols, x_shape, (ho, wo), relu_mask = cache
        if relu_mask is not None:
            g = g * relu_mask
        d_bias = g.sum(axis=(0, 2, 3), dtype=np.float64).astype(g.dtype)
        g_mat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, self.kernels)
        d_weight = (g_mat.T @ cols).reshape(weight.shape)
        if self.stride == 1:
            # dx = full correlation of g with the flipped kernels, as one GEMM
            s = self.size
            g_pad = np.zeros(
                (g.shape[0], self.kernels, ho + 2 * (s - 1), wo + 2 * (s - 1)),
                dtype=g.dtype,
            )
            g_pad[:, :, s - 1 : s - 1 + ho, s - 1 : s - 1 + wo] = g
            win = sliding_window_view(g_pad, (s, s), axis=(2, 3))
            gcols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(
                g.shape[0] * x_shape[2] * x_shape[3], -1
            )
            w_flip = weight[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(x_shape[1], -1)
            dx = (gcols @ w_flip.T).reshape(
                g.shape[0], x_shape[2], x_shape[3], x_shape[1]
            ).transpose(0, 3, 1, 2)
            return np.ascontiguousarray(dx), [d_weight, d_bias]
        d_cols = (g_mat @ weight.reshape(self.kernels, -1)).reshape(
            g.shape[0], ho, wo, x_shape[1], self.size, self.size
        )
        dx = np.zeros(x_shape, dtype=g.dtype)
        for di in range(self.size):
            for dj in range(self.size):
                dx[
                    :, :,
                    di : di + self.stride * ho : self.stride,
                    dj : dj + self.stride * wo : self.stride,
                ] += d_cols[:, :, :, :, di, dj].transpose(0, 3, 1, 2)
        return dx, [d_weight, d_bias]


class MaxPool:
    def __init__(self, window, stride=None):
        if window < 1:
            raise ValueError("pool window must be >= 1")
        self.window = window
        self.stride = window if stride is None else stride
        if self.stride < 1:
            raise ValueError("pool stride must be >= 1")
        self.in_shape = None

    def trace(self, in_shape):
        if len(in_shape) != 3:
            raise ValueError(f"pool expects a (C, H, W) input, got {in_shape}")
        c, h, w = in_shape
        if self.window > h or self.window > w:
            raise ValueError(f"pool window {self.window} exceeds input extent {(h, w)}")
        self.in_shape = in_shape
        ho = (h - self.window) // self.stride + 1
        wo = (w - self.window) // self.stride + 1
        return (c, ho, wo)

    def param_shapes(self):
        return []

    def init_params(self, views, rng):
        pass

    def forward(self, x, params, mode, rng):
        win = sliding_window_view(x, (self.window, self.window), axis=(2, 3))
        win = win[:, :, :: self.stride, :: self.stride]
        n, c, ho, wo = win.shape[:4]
        flat = win.reshape(n, c, ho, wo, self.window * self.window)
        arg = flat.argmax(axis=-1)
        out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
        return out, (arg, x.shape)

    def backward(self, g, cache, params):
        arg, x_shape = cache
        n, c, ho, wo = g.shape
        w = self.window
        dx = np.zeros(x_shape, dtype=g.dtype)
        if self.stride == w:
            onehot = arg[..., None] == np.arange(w * w)
            block = (g[..., None] * onehot).reshape(n, c, ho, wo, w, w)
            block = block.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho * w, wo * w)
            dx[:, :, : ho * w, : wo * w] = block
        else:
            n_i, c_i, i_i, j_i = np.indices((n, c, ho, wo))
            rows = i_i * self.stride + arg // w
            cols = j_i * self.stride + arg % w
            np.add.at(dx, (n_i, c_i, rows, cols), g)
        return dx, []


class LocalNorm:
    def __init__(self, window, epsilon=1e-5):
        if window < 1 or window % 2 == 0:
            raise ValueError(f"local-norm window must be odd and >= 1, got {window}")
        if epsilon <= 0:
            raise ValueError("local-norm epsilon must be > 0")
        self.window = window
        self.epsilon = epsilon

    def trace(self, in_shape):
        if len(in_shape) != 3:
            raise ValueError(f"local norm expects a (C, H, W) input, got {in_shape}")
        _, h, w = in_shape
        if self.window > h or self.window > w:
            raise ValueError(f"local-norm window {self.window} exceeds extent {(h, w)}")
        return in_shape

    def param_shapes(self):
        return []

    def init_params(self, views, rng):
        pass

    def forward(self, x, params, mode, rng):
        return _local_norm_with_cache(x, self.window, self.epsilon)

    def backward(self, g, cache, params):
        return _local_norm_backward(g, cache), []


class FullyConnected:
    """Dense layer; flattens any input to (N, D) first."""

    def __init__(self, out_dim, activation="none"):
        if out_dim < 1:
            raise ValueError("fc out dim must be >= 1")
        if activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.out_dim = out_dim
        self.activation = activation
        self.in_dim = None

    def trace(self, in_shape):
        self.in_dim = int(np.prod(in_shape))
        return (self.out_dim,)

    def param_shapes(self):
        return [(self.out_dim, self.in_dim), (self.out_dim,)]

    def init_params(self, views, rng):
        weight, bias = views
        weight[...] = rng.normal(scale=_he_std(self.in_dim, self.activation), size=weight.shape)
        bias[...] = 0.0

    def forward(self, x, params, mode, rng):
        weight, bias = params
        flat = x.reshape(x.shape[0], -1)
        pre = flat @ weight.T + bias
        if self.activation == "relu":
            return np.maximum(pre, 0.0), (flat, x.shape, pre > 0.0)
        return pre, (flat, x.shape, None)

    def backward(self, g, cache, params):
        weight, _ = params
        flat, x_shape, relu_mask = cache
        if relu_mask is not None:
            g = g * relu_mask
        d_weight = g.T @ flat
        d_bias = g.sum(axis=0, dtype=np.float64).astype(g.dtype)
        dx = (g @ weight).reshape(x_shape)
        return dx, [d_weight, d_bias]


class Dropout:
    """Inverted dropout: scales kept units by 1/keep at train time."""

    def __init__(self, keep):
        if not 0.0 < keep <= 1.0:
            raise ValueError(f"dropout keep probability must be in (0, 1], got {keep}")
        self.keep = keep

    def trace(self, in_shape):
        return in_shape

    def param_shapes(self):
        return []

    def init_params(self, views, rng):
        pass

    def forward(self, x, params, mode, rng):
        if mode != "train" or self.keep == 1.0:
            return x, None
        mask = (rng.random(x.shape) < self.keep).astype(x.dtype) / self.keep
        return x * mask, mask

    def backward(self, g, cache, params):
        return (g if cache is None else g * cache), []


class L2Normalize:
    """Flatten to (N, D) and scale each row to unit L2 norm."""

    def trace(self, in_shape):
        return (int(np.prod(in_shape)),)

    def param_shapes(self):
        return []

    def init_params(self, views, rng):
        pass

    def forward(self, x, params, mode, rng):
        flat = x.reshape(x.shape[0], -1)
        norm = np.sqrt(np.sum(flat.astype(np.float64) ** 2, axis=1))
        safe = np.maximum(norm, 1e-30)[:, None]
        y = (flat / safe).astype(x.dtype)
        return y, (y, safe, x.shape)

    def backward(self, g, cache, params):
        y, safe, x_shape = cache
        inner = np.sum(g.astype(np.float64) * y, axis=1, keepdims=True)
        dx = (g - (y * inner).astype(g.dtype)) / safe.astype(g.dtype)
        return dx.reshape(x_shape).astype(g.dtype), []


class LinearCombine:
    """Bias-free linear embedding used to merge the normalized path outputs."""

    def __init__(self, out_dim):
        if out_dim < 1:
            raise ValueError("combine dim must be >= 1")
        self.out_dim = out_dim
        self.in_dim = None

    def trace(self, in_shape):
        (self.in_dim,) = in_shape
        return (self.out_dim,)

    def param_shapes(self):
        return [(self.out_dim, self.in_dim)]

    def init_params(self, views, rng):
        (weight,) = views
        weight[...] = rng.normal(scale=np.sqrt(1.0 / self.in_dim), size=weight.shape)

    def forward(self, x, params, mode, rng):
        (weight,) = params
        return x @ weight.T, x

    def backward(self, g, cache, params):
        (weight,) = params
        return g @ weight, [g.T @ cache]


_LAYER_KINDS = {
    "conv": (Conv, {"kernels": int, "size": int, "stride": int, "act": str}),
    "pool": (MaxPool, {"window": int, "stride": int}),
    "localnorm": (LocalNorm, {"window": int, "eps": float}),
    "fc": (FullyConnected, {"out": int, "act": str}),
    "dropout": (Dropout, {"keep": float}),
    "l2norm": (L2Normalize, {}),
}

_KW_RENAME = {"act": "activation", "out": "out_dim", "eps": "epsilon"}


@dataclass(frozen=True)
class PathSpec:
    name: str
    factor: int
    layers: tuple  # of (kind, sorted kwargs tuple)


@dataclass(frozen=True)
class MultiscaleConfig:
    input_shape: tuple
    combine_dim: int
    paths: tuple  # of PathSpec

    def validate(self):
        if len(self.input_shape) != 3 or any(s < 1 for s in self.input_shape):
            raise ValueError(f"input shape must be (C, H, W), got {self.input_shape}")
        if self.combine_dim < 1:
            raise ValueError("combine dim must be >= 1")
        if not self.paths:
            raise ValueError("at least one path is required")


def _parse_layer_line(line):
    parts = line.split()
    kind = parts[0]
    if kind not in _LAYER_KINDS:
        raise ValueError(f"unknown layer kind {kind!r} in line {line!r}")
    allowed = _LAYER_KINDS[kind][1]
    kwargs = []
    for token in parts[1:]:
        if "=" not in token:
            raise ValueError(f"malformed layer option {token!r} in line {line!r}")
        key, value = token.split("=", 1)
        if key not in allowed:
            raise ValueError(f"layer kind {kind!r} does not take option {key!r}")
        kwargs.append((key, allowed[key](value)))
    return kind, tuple(sorted(kwargs))


def parse_net_config(text):
    """Parse the INI-style architecture description into a MultiscaleConfig."""
    parser = configparser.ConfigParser()
    parser.read_string(text)
    if "input" not in parser or "combine" not in parser:
        raise ValueError("net config needs [input] and [combine] sections")
    shape = tuple(int(s) for s in parser["input"]["shape"].split(","))
    dim = int(parser["combine"]["dim"])
    paths = []
    for section in parser.sections():
        if not section.startswith("path:"):
            continue
        name = section.split(":", 1)[1]
        factor = int(parser[section].get("factor", "1"))
        lines = [l.strip() for l in parser[section]["layers"].splitlines() if l.strip()]
        paths.append(PathSpec(name, factor, tuple(_parse_layer_line(l) for l in lines)))
    config = MultiscaleConfig(shape, dim, tuple(paths))
    config.validate()
    return config


def canonical_config_text(config):
    """Regenerate a canonical text form (stable key order) for hashing."""
    out = io.StringIO()
    out.write(f"[input]\nshape = {','.join(str(s) for s in config.input_shape)}\n\n")
    out.write(f"[combine]\ndim = {config.combine_dim}\n")
    for path in config.paths:
        out.write(f"\n[path:{path.name}]\nfactor = {path.factor}\nlayers =\n")
        for kind, kwargs in path.layers:
            opts = " ".join(f"{k}={v}" for k, v in kwargs)
            out.write(f"    {kind} {opts}".rstrip() + "\n")
    return out.getvalue()


def config_hash(config):
    return hashlib.sha256(canonical_config_text(config).encode()).hexdigest()[:16]


def default_config_text():
    """Desk-scale default: full path plus half and quarter resolution paths."""
    return """\
[input]
shape = 3,32,32

[combine]
dim = 32

[path:full]
factor = 1
layers =
    conv kernels=8 size=3 stride=1 act=relu
    conv kernels=8 size=3 stride=1 act=relu
    pool window=2 stride=2
    localnorm window=3 eps=1e-5
    fc out=32 act=none
    dropout keep=0.6

[path:half]
factor = 2
layers =
    conv kernels=8 size=3 stride=1 act=relu
    pool window=2 stride=2
    fc out=16 act=none

[path:quarter]
factor = 4
layers =
    conv kernels=8 size=3 stride=1 act=relu
    pool window=2 stride=2
    fc out=16 act=none
"""


def _build_layer(kind, kwargs):
    cls = _LAYER_KINDS[kind][0]
    return cls(**{_KW_RENAME.get(k, k): v for k, v in kwargs})


class MultiscaleNet:
    """The embedding function: image tensor batch -> (N, d) embeddings.

    Parameters live in one flat array; per-layer arrays are reshaped views
    into it. ``forward`` accepts an alternative flat vector (same layout) so
    lookahead gradients and asynchronous snapshots never touch the canonical
    storage.
    """

    def __init__(self, config, rng=None, dtype=np.float32):
        config.validate()
        self.config = config
        self.dtype = np.dtype(dtype)
        self.paths = []  # (name, factor, [layers], path_out_dim)
        self._layout = []  # (path_name, layer_index, offset, shape) per param array
        self._normalizer = L2Normalize()
        offset = 0

        c, h, w = config.input_shape
        concat_dim = 0
        for spec in config.paths:
            if h % spec.factor or w % spec.factor:
                raise ValueError(
                    f"path {spec.name!r}: factor {spec.factor} does not divide {(h, w)}"
                )
            layers = [_build_layer(kind, kwargs) for kind, kwargs in spec.layers]
            shape = (c, h // spec.factor, w // spec.factor)
            for idx, layer in enumerate(layers):
                try:
                    shape = layer.trace(shape)
                except ValueError as exc:
                    raise ValueError(f"path {spec.name!r} layer {idx}: {exc}") from exc
                for pshape in layer.param_shapes():
                    size = int(np.prod(pshape))
                    self._layout.append((spec.name, idx, offset, pshape))
                    offset += size
            out_dim = int(np.prod(shape))
            concat_dim += out_dim
            self.paths.append((spec.name, spec.factor, layers, out_dim))

        self.combine = LinearCombine(config.combine_dim)
        self.combine.trace((concat_dim,))
        for pshape in self.combine.param_shapes():
            self._layout.append(("combine", 0, offset, pshape))
            offset += int(np.prod(pshape))

        self.n_params = offset
        self.embed_dim = config.combine_dim
        self.params = np.zeros(self.n_params, dtype=self.dtype)
        if rng is None:
            rng = np.random.default_rng(0)
        for layer, views in self._iter_layer_views(self.params):
            layer.init_params(views, rng)

    def _views(self, flat, path_name, layer_index):
        views = []
        for name, idx, offset, shape in self._layout:
            if name == path_name and idx == layer_index:
                size = int(np.prod(shape))
                views.append(flat[offset : offset + size].reshape(shape))
        return views

    def _iter_layer_views(self, flat):
        for name, _factor, layers, _dim in self.paths:
            for idx, layer in enumerate(layers):
                yield layer, self._views(flat, name, idx)
        yield self.combine, self._views(flat, "combine", 0)

    def layer_params(self, flat=None):
        """Dict (path, layer_index) -> list of parameter views into `flat`."""
        flat = self.params if flat is None else flat
        out = {}
        for name, idx, offset, shape in self._layout:
            size = int(np.prod(shape))
            out.setdefault((name, idx), []).append(flat[offset : offset + size].reshape(shape))
        return out

    def first_conv_kernels(self, flat=None):
        """First convolution kernels per path, for filter export."""
        flat = self.params if flat is None else flat
        kernels = {}
        for name, _factor, layers, _dim in self.paths:
            for idx, layer in enumerate(layers):
                if isinstance(layer, Conv):
                    kernels[name] = self._views(flat, name, idx)[0]
                    break
        return kernels

    def forward(self, x, mode="infer", rng=None, params=None):
        """Embed a batch; returns (embeddings (N, d), cache for backward)."""
        if mode not in ("train", "infer"):
            raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
        if mode == "train" and rng is None:
            raise ValueError("train mode requires an rng for dropout masks")
        params = self.params if params is None else params
        x = np.asarray(x, dtype=self.dtype)
        single = x.ndim == 3
        if single:
            x = x[None]
        if x.shape[1:] != self.config.input_shape:
            raise ValueError(
                f"input shape {x.shape[1:]} does not match config {self.config.input_shape}"
            )

        path_caches = []
        normalized = []
        for name, factor, layers, _dim in self.paths:
            h = downsample(x, factor)
            layer_caches = []
            for idx, layer in enumerate(layers):
                h, cache = layer.forward(h, self._views(params, name, idx), mode, rng)
                if not np.isfinite(h).all():
                    raise FloatingPointError(
                        f"non-finite activations in path {name!r} layer {idx} "
                        f"({type(layer).__name__})"
                    )
                layer_caches.append(cache)
            vec, norm_cache = self._normalizer.forward(h, [], mode, rng)
            path_caches.append((layer_caches, norm_cache))
            normalized.append(vec)

        concat = np.concatenate(normalized, axis=1)
        emb, combine_cache = self.combine.forward(
            concat, self._views(params, "combine", 0), mode, rng
        )
        if not np.isfinite(emb).all():
            raise FloatingPointError("non-finite embedding out of the combine layer")
        cache = (params, path_caches, combine_cache, single)
        return (emb[0] if single else emb), cache

    def backward(self, cache, grad_embedding):
        """Gradient wrt all parameters, as a flat vector matching the layout."""
        if cache is None or len(cache) != 4:
            raise ValueError("missing or stale forward cache")
        params, path_caches, combine_cache, single = cache
        g = np.asarray(grad_embedding, dtype=self.dtype)
        if single:
            g = g[None]

        grads = np.zeros(self.n_params, dtype=self.dtype)

        def store(path_name, layer_index, arrays):
            for view, arr in zip(self._views(grads, path_name, layer_index), arrays):
                view[...] += arr

        g_concat, combine_grads = self.combine.backward(
            g, combine_cache, self._views(params, "combine", 0)
        )
        store("combine", 0, combine_grads)

        col = 0
        for (name, _factor, layers, dim), (layer_caches, norm_cache) in zip(
            self.paths, path_caches
        ):
            g_path = g_concat[:, col : col + dim]
            col += dim
            g_path, _ = self._normalizer.backward(g_path, norm_cache, [])
            for idx in range(len(layers) - 1, -1, -1):
                g_path, layer_grads = layers[idx].backward(
                    g_path, layer_caches[idx], self._views(params, name, idx)
                )
                store(name, idx, layer_grads)
        return grads

    def embed(self, x, params=None):
        """Deterministic inference-mode embeddings, cache discarded."""
        emb, _ = self.forward(x, mode="infer", params=params)
        return emb

    def path_embeddings(self, x, params=None):
        """Per-path normalized vectors (inference mode), keyed by path name."""
        _, cache = self.forward(x, mode="infer", params=params)
        concat = cache[2]
        out = {}
        col = 0
        for name, _factor, _layers, dim in self.paths:
            out[name] = concat[:, col : col + dim]
            col += dim
        return out


_CHECKPOINT_MAGIC = "tripletrank-checkpoint-v1"


def save_checkpoint(path, net, extra=None, params=None):
    """JSON header line + raw little-endian float32 parameters."""
    params = net.params if params is None else params
    if params.shape != net.params.shape:
        raise ValueError("params override does not match the network layout")
    header = {
        "magic": _CHECKPOINT_MAGIC,
        "config_hash": config_hash(net.config),
        "config_text": canonical_config_text(net.config),
        "input_shape": list(net.config.input_shape),
        "embed_dim": net.embed_dim,
        "param_count": net.n_params,
    }
    if extra:
        header["extra"] = extra
    with open(path, "wb") as fh:
        fh.write((json.dumps(header) + "\n").encode())
        fh.write(params.astype("<f4", copy=False).tobytes())


def load_checkpoint(path, config=None, dtype=np.float32):
    """Rebuild a net from a checkpoint; `config` (if given) must hash-match."""
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode())
        raw = fh.read()
    if header.get("magic") != _CHECKPOINT_MAGIC:
        raise ValueError(f"{path} is not a checkpoint file")
    if config is None:
        config = parse_net_config(header["config_text"])
    if config_hash(config) != header["config_hash"]:
        raise ValueError(
            f"checkpoint config hash {header['config_hash']} does not match "
            f"the supplied architecture ({config_hash(config)})"
        )
    net = MultiscaleNet(config, dtype=dtype)
    params = np.frombuffer(raw, dtype="<f4")
    if params.size != net.n_params:
        raise ValueError(
            f"checkpoint holds {params.size} parameters, architecture needs {net.n_params}"
        )
    net.params[...] = params.astype(dtype)
    return net, header
