"""
Red de dos capas ocultas (ReLU) con retropropagacion manual.

La misma familia instancia la red de SNPs, la red del rasgo y el estimador de
razon. Opcionalmente normaliza por lote cada capa oculta y concatena un rango
de columnas de la entrada a la entrada de la capa de salida.
"""

from dataclasses import dataclass, field

import numpy as np

from app.core.errors import DimensionError
from app.core.numerics.rng import RngStream

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


@dataclass(frozen=True)
class MlpSpec:
    input_dim: int
    hidden_dims: tuple[int, int]
    output_dim: int
    use_batch_norm: bool = False
    skip_inputs_to_output: bool = False
    skip_range: tuple[int, int] | None = None

    def __post_init__(self):
        if len(self.hidden_dims) != 2:
            raise DimensionError(f"hidden_dims debe tener largo 2: {self.hidden_dims}")
        dims = (self.input_dim, *self.hidden_dims, self.output_dim)
        if any(int(d) < 1 for d in dims):
            raise DimensionError(f"Todas las dimensiones deben ser >= 1: {dims}")
        if self.skip_range is not None:
            start, stop = self.skip_range
            if not 0 <= start < stop <= self.input_dim:
                raise DimensionError(f"skip_range fuera de la entrada: {self.skip_range}")

    @property
    def skip_slice(self) -> slice:
        if not self.skip_inputs_to_output:
            return slice(0, 0)
        if self.skip_range is None:
            return slice(0, self.input_dim)
        return slice(*self.skip_range)

    @property
    def skip_dim(self) -> int:
        s = self.skip_slice
        return s.stop - s.start

    @property
    def layer_shapes(self) -> dict[str, tuple[int, int]]:
        h1, h2 = self.hidden_dims
        return {
            "W1": (self.input_dim, h1),
            "W2": (h1, h2),
            "W3": (h2 + self.skip_dim, self.output_dim),
        }


@dataclass
class MlpParams:
    """Pesos entrenables en `weights`; momentos de batch-norm en `buffers`."""

    weights: dict[str, np.ndarray]
    buffers: dict[str, np.ndarray] = field(default_factory=dict)

    def copy(self) -> "MlpParams":
        return MlpParams(
            {k: v.copy() for k, v in self.weights.items()},
            {k: v.copy() for k, v in self.buffers.items()},
        )

    def zeros_like(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.weights.items()}

    def check(self, spec: MlpSpec):
        for name, shape in spec.layer_shapes.items():
            if self.weights[name].shape != shape:
                raise DimensionError(f"{name} tiene forma {self.weights[name].shape}, se esperaba {shape}")
        for name, arr in self.weights.items():
            if not np.all(np.isfinite(arr)):
                raise DimensionError(f"{name} tiene valores no finitos")


@dataclass
class _Layer:
    pre: np.ndarray
    post: np.ndarray  # entrada a la ReLU (tras batch-norm si aplica)
    act: np.ndarray
    xhat: np.ndarray | None = None
    inv_std: np.ndarray | None = None
    batch_stats: bool = False


@dataclass
class MlpCache:
    spec: MlpSpec
    params: MlpParams
    input: np.ndarray
    layers: list[_Layer]
    out_input: np.ndarray
    training: bool


def he_init(spec: MlpSpec, rng: RngStream) -> MlpParams:
    """Pesos U(-sqrt(6/fan_in), sqrt(6/fan_in)), sesgos en cero, batch-norm identidad."""
    gen = rng.generator
    weights: dict[str, np.ndarray] = {}
    buffers: dict[str, np.ndarray] = {}
    for i, (name, (fan_in, fan_out)) in enumerate(spec.layer_shapes.items(), start=1):
        bound = np.sqrt(6.0 / fan_in)
        weights[name] = gen.uniform(-bound, bound, size=(fan_in, fan_out))
        if i < 3 and spec.use_batch_norm:
            # sin sesgo antes de batch-norm: lo absorbe beta
            weights[f"gamma{i}"] = np.ones(fan_out)
            weights[f"beta{i}"] = np.zeros(fan_out)
            buffers[f"mean{i}"] = np.zeros(fan_out)
            buffers[f"var{i}"] = np.ones(fan_out)
        else:
            weights[f"b{i}"] = np.zeros(fan_out)
    return MlpParams(weights, buffers)


def _hidden_forward(
    h: np.ndarray, params: MlpParams, spec: MlpSpec, i: int, training: bool
) -> _Layer:
    w = params.weights
    pre = h @ w[f"W{i}"]
    if not spec.use_batch_norm:
        pre = pre + w[f"b{i}"]
        return _Layer(pre=pre, post=pre, act=np.maximum(pre, 0.0))

    n = pre.shape[0]
    batch_stats = training and n > 1
    if batch_stats:
        mean = pre.mean(axis=0)
        var = pre.var(axis=0)
        running_mean, running_var = params.buffers[f"mean{i}"], params.buffers[f"var{i}"]
        running_mean *= 1.0 - BN_MOMENTUM
        running_mean += BN_MOMENTUM * mean
        running_var *= 1.0 - BN_MOMENTUM
        running_var += BN_MOMENTUM * var * n / (n - 1)
    else:
        mean, var = params.buffers[f"mean{i}"], params.buffers[f"var{i}"]
    inv_std = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (pre - mean) * inv_std
    post = w[f"gamma{i}"] * xhat + w[f"beta{i}"]
    return _Layer(pre, post, np.maximum(post, 0.0), xhat, inv_std, batch_stats)


def mlp_forward(
    params: MlpParams, spec: MlpSpec, input: np.ndarray, training: bool = False
) -> tuple[np.ndarray, np.ndarray, MlpCache]:
    """
    Retorna (salida, primera capa oculta post-ReLU, cache para backward).
    Fuera de entrenamiento (o con un solo ejemplo) batch-norm usa los momentos
    acumulados.
    """
    input = np.asarray(input, dtype=np.float64)
    if input.ndim != 2 or input.shape[1] != spec.input_dim:
        raise DimensionError(f"Entrada con forma {input.shape}, se esperaban {spec.input_dim} columnas")

    layer1 = _hidden_forward(input, params, spec, 1, training)
    layer2 = _hidden_forward(layer1.act, params, spec, 2, training)
    if spec.skip_dim:
        out_input = np.concatenate([layer2.act, input[:, spec.skip_slice]], axis=1)
    else:
        out_input = layer2.act
    output = out_input @ params.weights["W3"] + params.weights["b3"]
    cache = MlpCache(spec, params, input, [layer1, layer2], out_input, training)
    return output, layer1.act, cache


def _hidden_backward(
    d_act: np.ndarray, layer: _Layer, h_in: np.ndarray, params: MlpParams, spec: MlpSpec, i: int,
    grads: dict[str, np.ndarray],
) -> np.ndarray:
    d_post = d_act * (layer.post > 0)
    if spec.use_batch_norm:
        gamma = params.weights[f"gamma{i}"]
        grads[f"gamma{i}"] = (d_post * layer.xhat).sum(axis=0)
        grads[f"beta{i}"] = d_post.sum(axis=0)
        d_xhat = d_post * gamma
        if layer.batch_stats:
            n = d_xhat.shape[0]
            d_pre = (layer.inv_std / n) * (
                n * d_xhat
                - d_xhat.sum(axis=0)
                - layer.xhat * (d_xhat * layer.xhat).sum(axis=0)
            )
        else:
            d_pre = d_xhat * layer.inv_std
    else:
        d_pre = d_post
        grads[f"b{i}"] = d_pre.sum(axis=0)
    grads[f"W{i}"] = h_in.T @ d_pre
    return d_pre @ params.weights[f"W{i}"].T


def mlp_backward(
    cache: MlpCache, grad_output: np.ndarray, grad_hidden1: np.ndarray | None = None
) -> tuple[dict[str, np.ndarray], np.ndarray]:
    """
    Gradientes respecto de cada peso y de la entrada, dado dL/dsalida.
    `grad_hidden1` suma un gradiente que entra directo por la primera capa
    oculta (cuando la perdida tambien la usa).
    """
    spec, params = cache.spec, cache.params
    grad_output = np.asarray(grad_output, dtype=np.float64)
    expected = (cache.input.shape[0], spec.output_dim)
    if grad_output.shape != expected:
        raise DimensionError(f"grad_output con forma {grad_output.shape}, se esperaba {expected}")
    if grad_hidden1 is not None and grad_hidden1.shape != cache.layers[0].act.shape:
        raise DimensionError(f"grad_hidden1 con forma {grad_hidden1.shape}, se esperaba {cache.layers[0].act.shape}")

    grads: dict[str, np.ndarray] = {}
    layer1, layer2 = cache.layers
    grads["W3"] = cache.out_input.T @ grad_output
    grads["b3"] = grad_output.sum(axis=0)
    d_out_input = grad_output @ params.weights["W3"].T
    h2 = spec.hidden_dims[1]

    d_act1 = _hidden_backward(d_out_input[:, :h2], layer2, layer1.act, params, spec, 2, grads)
    if grad_hidden1 is not None:
        d_act1 = d_act1 + grad_hidden1
    d_input = _hidden_backward(d_act1, layer1, cache.input, params, spec, 1, grads)
    if spec.skip_dim:
        d_input[:, spec.skip_slice] += d_out_input[:, h2:]
    return grads, d_input
