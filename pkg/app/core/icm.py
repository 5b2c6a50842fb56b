"""
Modelo causal implicito para GWAS.

    z_n ~ N(0, I_K), w_m ~ N(0, I_K)
    x_nm ~ Binomial(2, sigmoid(logit(z_n, w_m | phi)))
    y_n = f(x_n, z_n, eps_n | theta)

El proceso de SNPs es analisis factorial logistico (z_n . w_m + b_m, con un
logit base por SNP) o una red sobre [z_n, w_m]. El rasgo es lineal o una red sobre [x_n, z_n, eps_n] con z tambien
conectado a la capa de salida.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from typing import Any

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator
from scipy.special import expit, log_expit

from app.core.errors import DimensionError, DomainError
from app.core.numerics.mlp import MlpCache, MlpParams, MlpSpec, he_init, mlp_backward, mlp_forward
from app.core.numerics.rng import RngStream

LOG_2PI = float(np.log(2.0 * np.pi))
_LOG_BINOM2 = np.array([0.0, np.log(2.0), 0.0])
CUTPOINT_RANGE = (-3.0, 3.0)
PAIR_ROWS_PER_CHUNK = 65536


class SnpModelKind(str, Enum):
    LOGISTIC_FA = "LOGISTIC_FA"
    NEURAL = "NEURAL"


class TraitModelKind(str, Enum):
    LINEAR = "LINEAR"
    NEURAL = "NEURAL"


class TraitKind(str, Enum):
    REAL_IMPLICIT = "REAL_IMPLICIT"
    REAL_LOCATION_SHIFT = "REAL_LOCATION_SHIFT"
    CATEGORICAL = "CATEGORICAL"


def parse_pair(value: Any) -> Any:
    if isinstance(value, str):
        return tuple(int(v) for v in value.split(",") if v.strip())
    return value


class IcmConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    K: int = Field(3, ge=1)
    snp_hidden: tuple[int, int] = (64, 64)
    trait_hidden: tuple[int, int] = (32, 256)
    trait_kind: TraitKind = TraitKind.REAL_IMPLICIT
    num_levels: int = Field(2, ge=2)
    snp_model: SnpModelKind = SnpModelKind.LOGISTIC_FA
    trait_model: TraitModelKind = TraitModelKind.NEURAL
    group_lasso_scale: float = Field(1.0, gt=0)
    trait_batch_norm: bool = False

    _pairs = field_validator("snp_hidden", "trait_hidden", mode="before")(parse_pair)

    @field_validator("snp_hidden", "trait_hidden")
    @classmethod
    def _positive(cls, v: tuple[int, int]) -> tuple[int, int]:
        if any(h < 1 for h in v):
            raise ValueError("las capas ocultas deben tener al menos una unidad")
        return v


# Priors


def log_standard_normal(v: np.ndarray) -> tuple[float, np.ndarray]:
    """Suma de log-densidades N(0,1) independientes y su gradiente (-v)."""
    v = np.asarray(v, dtype=np.float64)
    return float(-0.5 * np.sum(v * v) - 0.5 * v.size * LOG_2PI), -v


def log_prior_z(z: np.ndarray) -> tuple[float, np.ndarray]:
    return log_standard_normal(z)


def log_prior_w(w: np.ndarray) -> tuple[float, np.ndarray]:
    return log_standard_normal(w)


# Modelo de SNPs


@dataclass
class SnpModelParams:
    kind: SnpModelKind
    K: int
    phi: MlpParams | None = None
    spec: MlpSpec | None = None
    # logit base por SNP (M,), estimacion puntual con prior plano; solo LOGISTIC_FA
    offset: np.ndarray | None = None

    @property
    def weights(self) -> dict[str, np.ndarray]:
        return {} if self.phi is None else self.phi.weights

    def copy(self) -> "SnpModelParams":
        return SnpModelParams(
            self.kind, self.K, None if self.phi is None else self.phi.copy(), self.spec,
            None if self.offset is None else self.offset.copy(),
        )


def snp_spec(config: IcmConfig) -> MlpSpec:
    return MlpSpec(input_dim=2 * config.K, hidden_dims=tuple(config.snp_hidden), output_dim=1)


def init_snp_model(config: IcmConfig, rng: RngStream) -> SnpModelParams:
    if config.snp_model == SnpModelKind.LOGISTIC_FA:
        return SnpModelParams(SnpModelKind.LOGISTIC_FA, config.K)
    spec = snp_spec(config)
    return SnpModelParams(SnpModelKind.NEURAL, config.K, he_init(spec, rng), spec)


def log_prior_phi(params: SnpModelParams) -> tuple[float, dict[str, np.ndarray]]:
    total, grads = 0.0, {}
    for name, arr in params.weights.items():
        value, grads[name] = log_standard_normal(arr)
        total += value
    return total, grads


def _check_latents(z: np.ndarray, w: np.ndarray, K: int):
    if z.ndim != 2 or w.ndim != 2 or z.shape[1] != K or w.shape[1] != K:
        raise DimensionError(f"z {z.shape} y w {w.shape} deben tener {K} columnas")


def _pair_inputs(z: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Filas [z_i, w_j] en orden (i, j), i mas lento."""
    n, b = z.shape[0], w.shape[0]
    return np.concatenate([np.repeat(z, b, axis=0), np.tile(w, (n, 1))], axis=1)


def _chunks(n: int, b: int) -> list[slice]:
    size = max(1, PAIR_ROWS_PER_CHUNK // max(b, 1))
    return [slice(s, min(s + size, n)) for s in range(0, n, size)]


def _check_offset(offset: np.ndarray | None, b: int) -> np.ndarray:
    if offset is None:
        return np.zeros(b)
    offset = np.asarray(offset, dtype=np.float64)
    if offset.shape != (b,):
        raise DimensionError(f"offset con forma {offset.shape} para {b} SNPs")
    return offset


def snp_logits(
    z: np.ndarray, w: np.ndarray, params: SnpModelParams, offset: np.ndarray | None = None
) -> np.ndarray:
    """
    Logits (individuos x SNPs) del lote; la red se evalua por bloques de
    individuos. `offset` es el logit base de cada SNP del lote.
    """
    z = np.asarray(z, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    _check_latents(z, w, params.K)
    base = _check_offset(offset, w.shape[0])
    if params.kind == SnpModelKind.LOGISTIC_FA:
        return z @ w.T + base
    out = np.empty((z.shape[0], w.shape[0]))
    for rows in _chunks(z.shape[0], w.shape[0]):
        y, _, _ = mlp_forward(params.phi, params.spec, _pair_inputs(z[rows], w))
        out[rows] = y.reshape(-1, w.shape[0]) + base
    return out


def allele_logits(X: np.ndarray, block: int = 4096) -> np.ndarray:
    """Logit de la frecuencia alelica de cada SNP, suavizada: (sum x + 1) / (2N + 2)."""
    N, M = X.shape
    counts = np.empty(M)
    for start in range(0, M, block):
        counts[start:start + block] = np.asarray(X[:, start:start + block]).sum(axis=0, dtype=np.float64)
    p = (counts + 1.0) / (2.0 * N + 2.0)
    return np.log(p) - np.log1p(-p)


def _validate_genotypes(x: np.ndarray):
    if np.any((x != 0) & (x != 1) & (x != 2)):
        raise DomainError("Genotipos fuera de {0, 1, 2}")


def snp_log_prob(x: np.ndarray, logit: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """
    log Binomial(x | 2, sigmoid(logit)) = log C(2,x) + x*logit - 2*softplus(logit)
    y su derivada x - 2*sigmoid(logit).
    """
    x = np.asarray(x)
    _validate_genotypes(x)
    logit = np.asarray(logit, dtype=np.float64)
    xf = x.astype(np.float64)
    value = _LOG_BINOM2[x.astype(np.int64)] + xf * logit - 2.0 * np.logaddexp(0.0, logit)
    grad = xf - 2.0 * expit(logit)
    return value, grad


@dataclass
class SnpLoglik:
    value: float
    grad_z: np.ndarray
    grad_w: np.ndarray
    grad_phi: dict[str, np.ndarray] = field(default_factory=dict)
    grad_offset: np.ndarray | None = None


def snp_loglik(
    x: np.ndarray,
    z: np.ndarray,
    w: np.ndarray,
    params: SnpModelParams,
    threads: int = 1,
    offset: np.ndarray | None = None,
) -> SnpLoglik:
    """
    Suma de log p(x_nm | z_n, w_m, phi) sobre el lote y sus gradientes respecto
    de z, w, phi y (si se pasa) el logit base de cada SNP. Los bloques se
    reducen en orden fijo.
    """
    z = np.asarray(z, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    _check_latents(z, w, params.K)
    if x.shape != (z.shape[0], w.shape[0]):
        raise DimensionError(f"x {x.shape} no coincide con el lote {(z.shape[0], w.shape[0])}")

    b = w.shape[0]
    base = _check_offset(offset, b)
    if params.kind == SnpModelKind.LOGISTIC_FA:
        value, G = snp_log_prob(x, z @ w.T + base)
        grad_offset = None if offset is None else G.sum(axis=0)
        return SnpLoglik(float(value.sum()), G @ w, G.T @ z, grad_offset=grad_offset)

    def run(rows: slice):
        inputs = _pair_inputs(z[rows], w)
        out, _, cache = mlp_forward(params.phi, params.spec, inputs)
        value, G = snp_log_prob(x[rows], out.reshape(-1, b) + base)
        grads, d_in = mlp_backward(cache, G.reshape(-1, 1))
        d_in = d_in.reshape(-1, b, 2 * params.K)
        gz, gw = d_in[:, :, :params.K].sum(axis=1), d_in[:, :, params.K:].sum(axis=0)
        return float(value.sum()), gz, gw, grads, G.sum(axis=0)

    chunks = _chunks(z.shape[0], b)
    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run, chunks))
    else:
        results = [run(c) for c in chunks]

    total = 0.0
    grad_z = np.empty_like(z)
    grad_w = np.zeros_like(w)
    grad_phi = params.phi.zeros_like()
    grad_offset = np.zeros(b)
    for rows, (value, gz, gw, grads, go) in zip(chunks, results):
        total += value
        grad_z[rows] = gz
        grad_w += gw
        grad_offset += go
        for name, g in grads.items():
            grad_phi[name] += g
    return SnpLoglik(total, grad_z, grad_w, grad_phi, None if offset is None else grad_offset)


# Modelo del rasgo


@dataclass
class TraitModelParams:
    model: TraitModelKind
    trait_kind: TraitKind
    num_levels: int
    M: int
    K: int
    weights: dict[str, np.ndarray]
    buffers: dict[str, np.ndarray] = field(default_factory=dict)
    spec: MlpSpec | None = None

    @property
    def net(self) -> MlpParams:
        return MlpParams(self.weights, self.buffers)

    def copy(self) -> "TraitModelParams":
        return TraitModelParams(
            self.model, self.trait_kind, self.num_levels, self.M, self.K,
            {k: v.copy() for k, v in self.weights.items()},
            {k: v.copy() for k, v in self.buffers.items()},
            self.spec,
        )


def trait_spec(config: IcmConfig, M: int) -> MlpSpec:
    """Entrada [x (M), z (K), eps (1)]; z llega tambien a la capa de salida."""
    return MlpSpec(
        input_dim=M + config.K + 1,
        hidden_dims=tuple(config.trait_hidden),
        output_dim=1,
        use_batch_norm=config.trait_batch_norm,
        skip_inputs_to_output=True,
        skip_range=(M, M + config.K),
    )


def init_trait_model(config: IcmConfig, M: int, rng: RngStream) -> TraitModelParams:
    if config.trait_model == TraitModelKind.LINEAR:
        weights = {"coef": np.zeros(M + config.K), "intercept": np.zeros(1)}
        return TraitModelParams(TraitModelKind.LINEAR, config.trait_kind, config.num_levels, M, config.K, weights)
    spec = trait_spec(config, M)
    net = he_init(spec, rng)
    return TraitModelParams(
        TraitModelKind.NEURAL, config.trait_kind, config.num_levels, M, config.K,
        net.weights, net.buffers, spec,
    )


def cutpoints(num_levels: int) -> np.ndarray:
    return np.linspace(*CUTPOINT_RANGE, num_levels - 1)


def sample_trait_noise(trait_kind: TraitKind, n: int, rng: RngStream) -> np.ndarray:
    """Normal estandar para rasgos reales; logistica para el categorico ordenado."""
    if trait_kind == TraitKind.CATEGORICAL:
        return rng.generator.logistic(0.0, 1.0, n)
    return rng.generator.standard_normal(n)


@dataclass
class TraitCache:
    params: TraitModelParams
    X: np.ndarray
    z: np.ndarray
    mlp: MlpCache | None = None


def trait_pass(
    X: np.ndarray, z: np.ndarray, noise: np.ndarray, params: TraitModelParams, training: bool = False
) -> tuple[np.ndarray, np.ndarray, TraitCache]:
    """
    Salida escalar de la red (o predictor lineal) por fila, primera capa oculta
    y cache. Solo REAL_IMPLICIT pasa el ruido como entrada.
    """
    X = np.asarray(X, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64).reshape(-1)
    n = X.shape[0]
    if X.shape != (n, params.M) or z.shape != (n, params.K) or noise.shape != (n,):
        raise DimensionError(f"Formas incompatibles: X {X.shape}, z {z.shape}, ruido {noise.shape}")
    eps = noise if params.trait_kind == TraitKind.REAL_IMPLICIT else np.zeros(n)

    if params.model == TraitModelKind.LINEAR:
        coef = params.weights["coef"]
        lin = X @ coef[:params.M] + z @ coef[params.M:] + params.weights["intercept"][0]
        return lin + eps, lin[:, None], TraitCache(params, X, z)

    inputs = np.concatenate([X, z, eps[:, None]], axis=1)
    out, h1, cache = mlp_forward(params.net, params.spec, inputs, training)
    return out[:, 0], h1, TraitCache(params, X, z, cache)


def trait_backward(
    cache: TraitCache, grad_score: np.ndarray, grad_hidden1: np.ndarray | None = None
) -> dict[str, np.ndarray]:
    params = cache.params
    grad_score = np.asarray(grad_score, dtype=np.float64).reshape(-1)
    if params.model == TraitModelKind.LINEAR:
        g = grad_score if grad_hidden1 is None else grad_score + grad_hidden1[:, 0]
        return {
            "coef": np.concatenate([cache.X.T @ g, cache.z.T @ g]),
            "intercept": np.array([g.sum()]),
        }
    grads, _ = mlp_backward(cache.mlp, grad_score[:, None], grad_hidden1)
    return grads


def trait_features(
    X: np.ndarray, z: np.ndarray, params: TraitModelParams
) -> tuple[np.ndarray, TraitCache]:
    """
    Entrada condicionante del estimador de razon, sin ruido: la primera capa
    oculta evaluada con eps = 0 (batch-norm con los momentos acumulados). El
    modelo lineal no tiene capa oculta y expone sus covariables [x, z].
    """
    n = np.shape(X)[0]
    _, h1, cache = trait_pass(X, z, np.zeros(n), params)
    if params.model == TraitModelKind.LINEAR:
        return np.concatenate([cache.X, cache.z], axis=1), cache
    return h1, cache


def trait_features_backward(cache: TraitCache, grad_features: np.ndarray) -> dict[str, np.ndarray]:
    """Gradiente respecto de theta que entra por trait_features."""
    params = cache.params
    if params.model == TraitModelKind.LINEAR:
        return {k: np.zeros_like(v) for k, v in params.weights.items()}
    grads, _ = mlp_backward(cache.mlp, np.zeros((cache.X.shape[0], 1)), grad_features)
    return grads


def trait_forward(
    x: np.ndarray, z: np.ndarray, noise: np.ndarray | float, params: TraitModelParams
) -> tuple[np.ndarray, np.ndarray]:
    """
    Rasgo (y primera capa oculta) dados genotipos, confusores y ruido.
    Acepta una fila (vectores) o un lote (matrices).
    """
    single = np.ndim(x) == 1
    X = np.atleast_2d(x)
    Z = np.atleast_2d(z)
    noise = np.atleast_1d(np.asarray(noise, dtype=np.float64))
    score, h1, _ = trait_pass(X, Z, noise, params)

    match params.trait_kind:
        case TraitKind.REAL_IMPLICIT:
            y = score
        case TraitKind.REAL_LOCATION_SHIFT:
            y = score + noise
        case TraitKind.CATEGORICAL:
            y = (score[:, None] + noise[:, None] > cutpoints(params.num_levels)).sum(axis=1).astype(np.float64)

    if single:
        return float(y[0]), h1[0]
    return y, h1


def categorical_probs(score: np.ndarray, num_levels: int) -> np.ndarray:
    """P(y = l | score) del modelo logit ordenado; filas suman 1."""
    c = np.concatenate([[-np.inf], cutpoints(num_levels), [np.inf]])
    cdf = expit(c[None, :] - np.asarray(score, dtype=np.float64)[:, None])
    return np.diff(cdf, axis=1)


def trait_log_prob(y: np.ndarray, score: np.ndarray, params: TraitModelParams) -> tuple[np.ndarray, np.ndarray]:
    """
    Log-densidad tratable del rasgo y su derivada respecto del score.
    Gaussiana de varianza unitaria (location-shift) o logit ordenado.
    """
    y = np.asarray(y, dtype=np.float64)
    score = np.asarray(score, dtype=np.float64)
    match params.trait_kind:
        case TraitKind.REAL_LOCATION_SHIFT:
            r = y - score
            return -0.5 * r * r - 0.5 * LOG_2PI, r
        case TraitKind.CATEGORICAL:
            levels = y.astype(np.int64)
            if np.any(levels != y) or np.any(levels < 0) or np.any(levels >= params.num_levels):
                raise DomainError(f"Niveles fuera de 0..{params.num_levels - 1}")
            c = np.concatenate([[-np.inf], cutpoints(params.num_levels), [np.inf]])
            a = c[levels] - score
            b = c[levels + 1] - score
            with np.errstate(invalid="ignore"):
                value = log_expit(b) + log_expit(-a) + np.log1p(-np.exp(a - b))
            return value, expit(a) + expit(b) - 1.0
        case _:
            raise DomainError(f"{params.trait_kind.value} no tiene densidad tratable")


def trait_predict_mean(
    X: np.ndarray, z: np.ndarray, params: TraitModelParams, rng: RngStream, draws: int = 32
) -> np.ndarray:
    """Media predictiva del rasgo; para el rasgo implicito promedia draws de ruido."""
    n = X.shape[0]
    if params.trait_kind == TraitKind.REAL_LOCATION_SHIFT:
        score, _, _ = trait_pass(X, z, np.zeros(n), params)
        return score
    if params.trait_kind == TraitKind.CATEGORICAL:
        score, _, _ = trait_pass(X, z, np.zeros(n), params)
        probs = categorical_probs(score, params.num_levels)
        return probs @ np.arange(params.num_levels)
    total = np.zeros(n)
    for _ in range(draws):
        score, _, _ = trait_pass(X, z, rng.generator.standard_normal(n), params)
        total += score
    return total / draws


# Prior group-Lasso


def snp_weight_groups(theta: TraitModelParams) -> np.ndarray:
    """Una fila por SNP con los pesos que lo conectan a la primera capa oculta."""
    if theta.model == TraitModelKind.LINEAR:
        return theta.weights["coef"][:theta.M, None]
    return theta.weights["W1"][:theta.M]


def group_lasso_term(groups: np.ndarray, scale: float) -> tuple[float, np.ndarray]:
    """-scale * sum_g sqrt(|g|) * ||W_g||_2, con subgradiente 0 en grupos nulos."""
    size = groups.shape[1]
    norms = np.sqrt((groups * groups).sum(axis=1))
    value = -scale * np.sqrt(size) * norms.sum()
    with np.errstate(invalid="ignore", divide="ignore"):
        unit = np.where(norms[:, None] > 0, groups / norms[:, None], 0.0)
    return float(value), -scale * np.sqrt(size) * unit


def group_lasso_log_prior(theta: TraitModelParams, scale: float) -> tuple[float, dict[str, np.ndarray]]:
    """
    Group-Lasso sobre los grupos de cada SNP mas N(0,1) sobre los demas pesos y
    sesgos. Los parametros de batch-norm no llevan prior.
    """
    M = theta.M
    grads = {k: np.zeros_like(v) for k, v in theta.weights.items()}
    first = "coef" if theta.model == TraitModelKind.LINEAR else "W1"

    total, group_grad = group_lasso_term(snp_weight_groups(theta), scale)
    grads[first][:M] = group_grad.reshape(grads[first][:M].shape)
    rest_value, rest_grad = log_standard_normal(theta.weights[first][M:])
    total += rest_value
    grads[first][M:] = rest_grad

    for name, arr in theta.weights.items():
        if name == first or name.startswith(("gamma", "beta")):
            continue
        value, grads[name] = log_standard_normal(arr)
        total += value
    return total, grads

