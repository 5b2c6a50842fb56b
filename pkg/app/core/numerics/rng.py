"""
Flujos aleatorios reproducibles y muestreadores de distribuciones.

Cada flujo se identifica por (seed, key); los hijos se derivan con spawn() y
son independientes del orden en que se consumen.
"""

from dataclasses import dataclass, field
from typing import Any

import numpy as np

from app.core.errors import DomainError

ALGORITHM = "PCG64"


@dataclass
class RngStream:
    seed: int
    key: tuple[int, ...] = ()
    algorithm: str = ALGORITHM
    _generator: np.random.Generator = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.seed < 0 or self.seed >= 2**64:
            raise DomainError(f"Semilla fuera de rango (u64): {self.seed}")
        if self.algorithm != ALGORITHM:
            raise DomainError(f"Algoritmo no soportado: {self.algorithm}")
        sequence = np.random.SeedSequence(self.seed, spawn_key=tuple(int(k) for k in self.key))
        self._generator = np.random.Generator(np.random.PCG64(sequence))

    @property
    def generator(self) -> np.random.Generator:
        return self._generator

    def spawn(self, *key: int) -> "RngStream":
        """Flujo hijo determinado solo por (seed, key + subclave)."""
        return RngStream(self.seed, self.key + tuple(key), self.algorithm)

    def integer_seed(self) -> int:
        """Entero de 31 bits para librerias que piden random_state."""
        return int(self._generator.integers(0, 2**31 - 1))

    @property
    def position(self) -> dict[str, Any]:
        return self._generator.bit_generator.state

    @position.setter
    def position(self, state: dict[str, Any]):
        self._generator.bit_generator.state = state


# Descriptores de distribuciones


@dataclass(frozen=True)
class Uniform:
    low: float = 0.0
    high: float = 1.0


@dataclass(frozen=True)
class Normal:
    loc: float = 0.0
    scale: float = 1.0


@dataclass(frozen=True)
class Gamma:
    shape: float
    scale: float = 1.0


@dataclass(frozen=True)
class Beta:
    a: float
    b: float


@dataclass(frozen=True)
class Dirichlet:
    alpha: tuple[float, ...]


@dataclass(frozen=True)
class InverseGamma:
    shape: float
    scale: float


Distribution = Uniform | Normal | Gamma | Beta | Dirichlet | InverseGamma


def _log_gamma_draws(shape: float | np.ndarray, size, gen: np.random.Generator) -> np.ndarray:
    """
    Log de muestras Gamma(shape, 1). Para shape < 1 usa Gamma(shape+1)*U^(1/shape)
    en escala log, que no colapsa a cero con shapes pequenos (a = 0.01).
    """
    shape = np.broadcast_to(np.asarray(shape, dtype=np.float64), size)
    boosted = shape < 1.0
    g = gen.gamma(np.where(boosted, shape + 1.0, shape))
    u = 1.0 - gen.random(size)  # (0, 1]
    return np.log(g) + np.where(boosted, np.log(u) / shape, 0.0)


def validate(dist: Distribution):
    match dist:
        case Uniform(low, high):
            if not high > low:
                raise DomainError(f"Uniform requiere high > low: {dist}")
        case Normal(_, scale):
            if not scale >= 0:
                raise DomainError(f"Normal requiere scale >= 0: {dist}")
        case Gamma(shape, scale):
            if not (shape > 0 and scale > 0):
                raise DomainError(f"Gamma requiere shape > 0 y scale > 0: {dist}")
        case Beta(a, b):
            if not (np.all(np.asarray(a) > 0) and np.all(np.asarray(b) > 0)):
                raise DomainError(f"Beta requiere a > 0 y b > 0: {dist}")
        case Dirichlet(alpha):
            if len(alpha) < 2 or not all(c > 0 for c in alpha):
                raise DomainError(f"Dirichlet requiere concentraciones > 0: {dist}")
        case InverseGamma(shape, scale):
            if not (shape > 0 and scale > 0):
                raise DomainError(f"InverseGamma requiere shape > 0 y scale > 0: {dist}")
        case _:
            raise DomainError(f"Distribucion desconocida: {dist!r}")


def sample(dist: Distribution, rng: RngStream, size: int | tuple[int, ...] | None = None):
    """
    Una muestra (size=None) o un arreglo de muestras de la distribucion.
    Dirichlet agrega una ultima dimension con los componentes.
    """
    validate(dist)
    gen = rng.generator
    shape = () if size is None else (size if isinstance(size, tuple) else (size,))

    match dist:
        case Uniform(low, high):
            out = gen.uniform(low, high, shape)
        case Normal(loc, scale):
            out = loc + scale * gen.standard_normal(shape)
        case Gamma(shape_, scale):
            out = np.exp(_log_gamma_draws(shape_, shape, gen)) * scale
        case Beta(a, b):
            log_x = _log_gamma_draws(a, shape, gen)
            log_y = _log_gamma_draws(b, shape, gen)
            # x / (x + y) sin overflow
            out = 1.0 / (1.0 + np.exp(log_y - log_x))
        case Dirichlet(alpha):
            alpha_arr = np.asarray(alpha, dtype=np.float64)
            logs = _log_gamma_draws(alpha_arr, shape + alpha_arr.shape, gen)
            logs -= logs.max(axis=-1, keepdims=True)
            weights = np.exp(logs)
            out = weights / weights.sum(axis=-1, keepdims=True)
        case InverseGamma(shape_, scale):
            out = scale * np.exp(-_log_gamma_draws(shape_, shape, gen))

    if size is None and not isinstance(dist, Dirichlet):
        return float(out)
    return out
