"""
Verificacion de gradientes por diferencias centrales.
"""

from collections.abc import Callable

import numpy as np

from app.core.errors import NumericError

LossFn = Callable[[dict[str, np.ndarray]], tuple[float, dict[str, np.ndarray]]]


def relative_errors(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    denom = np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))
    return np.abs(analytic - numeric) / denom


def numeric_gradient(
    loss_fn: LossFn, params: dict[str, np.ndarray], step: float = 1e-6
) -> dict[str, np.ndarray]:
    numeric: dict[str, np.ndarray] = {}
    for name, p in params.items():
        grad = np.zeros(p.shape, dtype=np.float64)
        # indexado por coordenada: p puede no ser contiguo
        for idx in np.ndindex(p.shape):
            original = p[idx]
            p[idx] = original + step
            plus, _ = loss_fn(params)
            p[idx] = original - step
            minus, _ = loss_fn(params)
            p[idx] = original
            if not (np.isfinite(plus) and np.isfinite(minus)):
                raise NumericError("Perdida no finita durante diferencias finitas", block=name)
            grad[idx] = (plus - minus) / (2.0 * step)
        numeric[name] = grad
    return numeric


def gradient_check(loss_fn: LossFn, params: dict[str, np.ndarray], step: float = 1e-6) -> float:
    """
    Error relativo maximo entre el gradiente que devuelve loss_fn y diferencias
    centrales, sobre todas las coordenadas de todos los parametros.

    loss_fn recibe el dict de parametros (perturbado in-place) y devuelve
    (perdida, gradientes con las mismas claves).
    """
    loss, analytic = loss_fn(params)
    if not np.isfinite(loss):
        raise NumericError("Perdida no finita en el punto base")
    analytic = {k: np.array(v, dtype=np.float64, copy=True) for k, v in analytic.items()}
    numeric = numeric_gradient(loss_fn, params, step)

    worst = 0.0
    for name in params:
        errors = relative_errors(analytic[name], numeric[name])
        if errors.size:
            worst = max(worst, float(errors.max()))
    return worst
