"""
Adam con correccion de sesgo. Minimiza: quien asciende pasa el gradiente negado.
"""

from dataclasses import dataclass, field

import numpy as np

from app.core.errors import DimensionError, NumericError


@dataclass
class AdamState:
    step_size: float = 0.005
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    # pasos por fila, solo para actualizaciones dispersas
    row_steps: dict[str, np.ndarray] = field(default_factory=dict)

    def _moments(self, name: str, like: np.ndarray):
        if name not in self.m:
            self.m[name] = np.zeros_like(like, dtype=np.float64)
            self.v[name] = np.zeros_like(like, dtype=np.float64)
        return self.m[name], self.v[name]


def _check_finite(grads: dict[str, np.ndarray]):
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError("Gradiente no finito", block=name)


def adam_step(
    state: AdamState,
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    rows: np.ndarray | None = None,
) -> tuple[dict[str, np.ndarray], AdamState]:
    """
    Un paso de Adam in-place sobre `params`.

    Con `rows`, los gradientes corresponden solo a esas filas de cada parametro
    y el conteo de pasos (y la correccion de sesgo) se lleva por fila.
    """
    _check_finite(grads)
    state.step += 1
    b1, b2 = state.beta1, state.beta2

    for name, g in grads.items():
        p = params[name]
        m, v = state._moments(name, p)
        if rows is None:
            if g.shape != p.shape:
                raise DimensionError(f"Gradiente de {name} con forma {g.shape}, parametro {p.shape}")
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            m_hat = m / (1 - b1**state.step)
            v_hat = v / (1 - b2**state.step)
            p -= state.step_size * m_hat / (np.sqrt(v_hat) + state.eps)
            continue

        if g.shape != (len(rows),) + p.shape[1:]:
            raise DimensionError(f"Gradiente disperso de {name} con forma {g.shape}")
        counts = state.row_steps.setdefault(name, np.zeros(p.shape[0], dtype=np.int64))
        counts[rows] += 1
        t = counts[rows].reshape((-1,) + (1,) * (p.ndim - 1))
        m_rows = b1 * m[rows] + (1 - b1) * g
        v_rows = b2 * v[rows] + (1 - b2) * g * g
        m[rows] = m_rows
        v[rows] = v_rows
        m_hat = m_rows / (1 - b1**t)
        v_hat = v_rows / (1 - b2**t)
        p[rows] -= state.step_size * m_hat / (np.sqrt(v_hat) + state.eps)

    return params, state
