"""
Estimador de razon r(y, h1) ~ log p(y | x, z, theta) - log q(y).

Se entrena discriminando muestras del modelo (etiqueta 1) de los datos
(etiqueta 0); su entrada es el rasgo y la primera capa oculta de la red del
rasgo evaluada sin ruido (las covariables [x, z] en el modelo lineal).
"""

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from app.core.errors import DimensionError
from app.core.numerics.mlp import MlpParams, MlpSpec, he_init, mlp_backward, mlp_forward
from app.core.numerics.rng import RngStream


def ratio_spec(hidden1_dim: int, hidden: tuple[int, int] = (64, 64)) -> MlpSpec:
    return MlpSpec(input_dim=1 + hidden1_dim, hidden_dims=tuple(hidden), output_dim=1)


def init_ratio(hidden1_dim: int, hidden: tuple[int, int], rng: RngStream) -> tuple[MlpParams, MlpSpec]:
    """Capas ocultas He; capa de salida en cero, asi r = 0 hasta el primer paso."""
    spec = ratio_spec(hidden1_dim, hidden)
    params = he_init(spec, rng)
    params.weights["W3"][:] = 0.0
    return params, spec


def ratio_inputs(y: np.ndarray, h1: np.ndarray) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64).reshape(-1, 1)
    if h1.shape[0] != y.shape[0]:
        raise DimensionError(f"y con {y.shape[0]} filas y h1 con {h1.shape[0]}")
    return np.concatenate([y, h1], axis=1)


def ratio_values(params: MlpParams, spec: MlpSpec, y: np.ndarray, h1: np.ndarray) -> np.ndarray:
    out, _, _ = mlp_forward(params, spec, ratio_inputs(y, h1))
    return out[:, 0]


@dataclass
class RatioLoss:
    value: float
    grads: dict[str, np.ndarray]


def ratio_loss(
    params: MlpParams, spec: MlpSpec, y_real: np.ndarray, y_fake: np.ndarray, h1: np.ndarray
) -> RatioLoss:
    """
    mean(-log sigmoid(r(y_fake, h1))) + mean(-log(1 - sigmoid(r(y_real, h1))))

    y su gradiente respecto de los pesos del estimador. Ambos lotes comparten
    h1, calculado en la misma pasada de la red del rasgo.
    """
    r_fake, _, cache_fake = mlp_forward(params, spec, ratio_inputs(y_fake, h1))
    r_real, _, cache_real = mlp_forward(params, spec, ratio_inputs(y_real, h1))
    n_fake, n_real = r_fake.shape[0], r_real.shape[0]

    value = float(np.logaddexp(0.0, -r_fake).mean() + np.logaddexp(0.0, r_real).mean())
    grads_fake, _ = mlp_backward(cache_fake, (expit(r_fake) - 1.0) / n_fake)
    grads_real, _ = mlp_backward(cache_real, expit(r_real) / n_real)
    return RatioLoss(value, {k: grads_fake[k] + grads_real[k] for k in grads_fake})


def ratio_input_grads(
    params: MlpParams, spec: MlpSpec, y: np.ndarray, h1: np.ndarray, weight: np.ndarray | float
) -> tuple[np.ndarray, np.ndarray]:
    """d(sum weight * r(y, h1)) respecto de y y de h1; los pesos del estimador quedan fijos."""
    out, _, cache = mlp_forward(params, spec, ratio_inputs(y, h1))
    grad_out = np.broadcast_to(np.asarray(weight, dtype=np.float64), out.shape[:1]).reshape(-1, 1)
    _, d_in = mlp_backward(cache, grad_out)
    return d_in[:, 0], d_in[:, 1:]
