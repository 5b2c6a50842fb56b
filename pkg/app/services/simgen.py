"""
Simulador de datos GWAS con estructura poblacional y verdad conocida.

Frecuencias alelicas F = Gamma S (M x N), genotipos Binomial(2, F) y un rasgo
lineal con efecto por grupo y ruido heterocedastico.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum

import numpy as np
from loguru import logger
from pydantic import BaseModel, ConfigDict, Field, model_validator

from app.core.errors import DimensionError, DomainError
from app.core.numerics.rng import Beta, Dirichlet, InverseGamma, Normal, RngStream, Uniform, sample
from app.core.numerics.stats import kmeans

FREQ_EPS = 1e-4
HAPMAP_PROPORTIONS = (60 / 210, 60 / 210, 90 / 210)
GENOTYPE_ROWS_PER_TASK = 1024


class Family(str, Enum):
    BN_SURROGATE = "BN_SURROGATE"
    PSD = "PSD"
    SPATIAL = "SPATIAL"
    PC_SURROGATE = "PC_SURROGATE"
    UNSTRUCTURED = "UNSTRUCTURED"


@dataclass
class StructureMatrices:
    Gamma: np.ndarray  # M x K_pop
    S: np.ndarray  # K_pop x N
    family: Family
    sparsity_a: float
    labels: np.ndarray  # subpoblacion (o membresia dominante) de cada individuo

    @property
    def M(self) -> int:
        return self.Gamma.shape[0]

    @property
    def N(self) -> int:
        return self.S.shape[1]

    def frequencies(self, rows: slice = slice(None)) -> np.ndarray:
        """pi = clamp(Gamma S) para un rango de SNPs."""
        return np.clip(self.Gamma[rows] @ self.S, FREQ_EPS, 1.0 - FREQ_EPS)


@dataclass
class SimulatedDataset:
    genotypes: np.ndarray  # N x M uint8
    traits: np.ndarray
    beta: np.ndarray
    causal_set: np.ndarray
    lambda_: np.ndarray
    sigma: np.ndarray
    structure: StructureMatrices
    seed: int


class SimConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    family: Family = Family.PSD
    a: float = Field(0.1, gt=0)
    M: int = Field(5000, ge=1)
    N: int = Field(500, ge=2)
    K_pop: int = Field(3, ge=1)
    n_causal: int = Field(10, ge=0)
    beta_sd: float = Field(0.5, ge=0)

    @model_validator(mode="after")
    def _check(self) -> "SimConfig":
        if self.n_causal > self.M:
            raise ValueError(f"n_causal={self.n_causal} mayor que M={self.M}")
        if self.family == Family.BN_SURROGATE and self.K_pop != 3:
            raise ValueError("BN_SURROGATE requiere K_pop = 3")
        return self


# Configuraciones con nombre: familia y N a escala completa (M = 100000)
PRESETS: dict[str, dict] = {
    "hapmap": {"family": Family.BN_SURROGATE, "N": 5000},
    "tgp": {"family": Family.PC_SURROGATE, "N": 1500},
    "hgdp": {"family": Family.PC_SURROGATE, "N": 940},
    "psd": {"family": Family.PSD, "N": 5000},
    "spatial": {"family": Family.SPATIAL, "N": 5000},
}
FULL_M = 100_000
DESK_DIMS = {"M": 5000, "N": 500}


def preset(name: str, a: float = 1.0, full_scale: bool = False, **overrides) -> SimConfig:
    try:
        base = dict(PRESETS[name])
    except KeyError:
        raise DomainError(f"Configuracion desconocida: {name} (opciones: {', '.join(PRESETS)})") from None
    base.update({"M": FULL_M} if full_scale else DESK_DIMS)
    base["a"] = a
    base.update(overrides)
    return SimConfig(**base)


def balding_nichols(p: np.ndarray, F: np.ndarray, k: int, rng: RngStream) -> np.ndarray:
    """k frecuencias por SNP de Beta(p(1-F)/F, (1-p)(1-F)/F)."""
    p = np.asarray(p, dtype=np.float64)[:, None]
    F = np.asarray(F, dtype=np.float64)[:, None]
    shape = (p.shape[0], k)
    a = np.broadcast_to(p * (1 - F) / F, shape)
    b = np.broadcast_to((1 - p) * (1 - F) / F, shape)
    return sample(Beta(a, b), rng, shape)


def _bn_gamma(M: int, K_pop: int, rng: RngStream) -> np.ndarray:
    p = sample(Uniform(0.1, 0.9), rng.spawn(0), M)
    F = sample(Uniform(0.01, 0.2), rng.spawn(1), M)
    return balding_nichols(p, F, K_pop, rng.spawn(2))


def _uniform_gamma(M: int, rng: RngStream) -> np.ndarray:
    gamma = np.empty((M, 3))
    gamma[:, :2] = 0.9 * sample(Uniform(0.0, 0.5), rng, (M, 2))
    gamma[:, 2] = 0.05
    return gamma


def _rescale(v: np.ndarray) -> np.ndarray:
    """Lleva v a (0, 1) dejando un margen para no tocar los extremos."""
    lo, hi = v.min(), v.max()
    if hi == lo:
        return np.full_like(v, 0.5)
    return 0.01 + 0.98 * (v - lo) / (hi - lo)


def _quadrant_labels(S: np.ndarray) -> np.ndarray:
    return (2 * (S[0] > 0.5) + (S[1] > 0.5)).astype(np.int64)


def make_structure(family: Family | str, a: float, M: int, N: int, K_pop: int, rng: RngStream) -> StructureMatrices:
    family = Family(family)
    if not a > 0:
        raise DomainError(f"La esparsidad a debe ser > 0, se recibio {a}")
    if M < 1 or N < 1:
        raise DimensionError(f"Dimensiones invalidas M={M}, N={N}")

    match family:
        case Family.BN_SURROGATE:
            if K_pop != 3:
                raise DomainError("BN_SURROGATE requiere K_pop = 3")
            gamma = _bn_gamma(M, K_pop, rng.spawn(0))
            labels = rng.spawn(1).generator.choice(K_pop, size=N, p=HAPMAP_PROPORTIONS)
            S = np.zeros((K_pop, N))
            S[labels, np.arange(N)] = 1.0
        case Family.PSD:
            gamma = _bn_gamma(M, K_pop, rng.spawn(0))
            S = sample(Dirichlet((a,) * K_pop), rng.spawn(1), N).T
            labels = S.argmax(axis=0)
        case Family.SPATIAL:
            gamma = _uniform_gamma(M, rng.spawn(0))
            S = np.ones((3, N))
            S[:2] = sample(Beta(a, a), rng.spawn(1), (2, N))
            labels = _quadrant_labels(S)
        case Family.PC_SURROGATE:
            # dos ejes suaves en lugar de las componentes principales empiricas
            gamma = _uniform_gamma(M, rng.spawn(0))
            u = np.sort(sample(Uniform(), rng.spawn(1), N))
            curve = np.sin(2 * np.pi * u) + 0.1 * sample(Normal(), rng.spawn(2), N)
            S = np.ones((3, N))
            S[0] = _rescale(u)
            S[1] = _rescale(curve)
            labels = _quadrant_labels(S)
        case Family.UNSTRUCTURED:
            gamma = sample(Uniform(0.1, 0.9), rng.spawn(0), (M, 1))
            S = np.ones((1, N))
            labels = np.zeros(N, dtype=np.int64)

    logger.debug("Estructura {} (a={}) M={} N={} K_pop={}", family.value, a, M, N, S.shape[0])
    return StructureMatrices(gamma, S, family, float(a), np.asarray(labels, dtype=np.int64))


def simulate_genotypes(structure: StructureMatrices, rng: RngStream, threads: int = 1) -> np.ndarray:
    """
    x_nm = 1[u1 < pi_mn] + 1[u2 < pi_mn] con un flujo propio por SNP, asi el
    resultado no depende del numero de hilos. Devuelve N x M uint8.
    """
    M, N = structure.M, structure.N
    X = np.empty((N, M), dtype=np.uint8)

    def fill(start: int):
        stop = min(start + GENOTYPE_ROWS_PER_TASK, M)
        pi = structure.frequencies(slice(start, stop))
        for offset in range(stop - start):
            gen = rng.spawn(start + offset).generator
            u = gen.random((2, N))
            X[:, start + offset] = (u[0] < pi[offset]).astype(np.uint8) + (u[1] < pi[offset])

    starts = range(0, M, GENOTYPE_ROWS_PER_TASK)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(fill, starts))
    else:
        for start in starts:
            fill(start)
    return X


def simulate_traits(
    X: np.ndarray,
    S: np.ndarray,
    n_causal: int,
    rng: RngStream,
    beta_sd: float = 0.5,
    n_groups: int = 3,
    offsets: bool = True,
    noise: bool = True,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """
    y_n = sum_m beta_m x_nm + lambda_n + eps_n, eps_n ~ N(0, sigma_n^2).

    Los primeros n_causal SNPs son causales. lambda y sigma son constantes
    dentro de cada grupo de K-means sobre las columnas de S.
    """
    N, M = X.shape
    if n_causal > M:
        raise DomainError(f"n_causal={n_causal} mayor que M={M}")
    if S.shape[1] != N:
        raise DimensionError(f"S tiene {S.shape[1]} columnas para {N} individuos")

    beta = np.zeros(M)
    if n_causal and beta_sd > 0:
        beta[:n_causal] = sample(Normal(0.0, beta_sd), rng.spawn(0), n_causal)

    points = S.T
    groups = min(n_groups, len(np.unique(points, axis=0)))
    partition = kmeans(points, groups, rng.spawn(1))
    tau = np.sqrt(sample(InverseGamma(3.0, 1.0), rng.spawn(2), groups))
    lambda_ = (partition + 1.0) if offsets else np.zeros(N)
    sigma = tau[partition] if noise else np.zeros(N)
    eps = sigma * rng.spawn(3).generator.standard_normal(N)

    y = X[:, :n_causal].astype(np.float64) @ beta[:n_causal] + lambda_ + eps
    return y, beta, lambda_, sigma


def simulate_dataset(config: SimConfig, seed: int, threads: int = 1) -> SimulatedDataset:
    """Estructura, genotipos y rasgo a partir de una sola semilla."""
    root = RngStream(seed)
    structure = make_structure(config.family, config.a, config.M, config.N, config.K_pop, root.spawn(0))
    X = simulate_genotypes(structure, root.spawn(1), threads=threads)
    y, beta, lambda_, sigma = simulate_traits(X, structure.S, config.n_causal, root.spawn(2), config.beta_sd)
    logger.info(
        "Simulado {} a={} ({} x {}), {} SNPs causales",
        config.family.value, config.a, config.N, config.M, config.n_causal,
    )
    return SimulatedDataset(
        genotypes=X,
        traits=y,
        beta=beta,
        causal_set=np.flatnonzero(beta),
        lambda_=lambda_,
        sigma=sigma,
        structure=structure,
        seed=seed,
    )


def membership_sparsity(S: np.ndarray) -> float:
    """Peso maximo medio de las columnas de S (mayor = individuos mas cerca de los vertices)."""
    return float(S.max(axis=0).mean())
