"""
Estado variacional compartido por las dos etapas de inferencia y sus
configuraciones.

q(z_n) y q(w_m) son normales diagonales (mu, log_sigma); phi y theta son
estimaciones puntuales. Los optimizadores se guardan por bloque para que un
ajuste reanudado desde checkpoint continue bit a bit.
"""

from dataclasses import dataclass, field

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator

from app.core.icm import (
    IcmConfig,
    SnpModelKind,
    SnpModelParams,
    TraitModelParams,
    init_snp_model,
    parse_pair,
)
from app.core.numerics.mlp import MlpParams, MlpSpec
from app.core.numerics.optim import AdamState
from app.core.numerics.rng import RngStream

LOG_SIGMA_MIN = -8.0
LOG_SIGMA_MAX = 4.0
LOG_SIGMA_INIT = -2.0
STAGE1, STAGE2 = 1, 2


class Stage1Config(BaseModel):
    model_config = ConfigDict(extra="forbid")

    snp_batch_size: int = Field(512, ge=1)
    individual_batch_size: int | None = Field(None, ge=1)  # None: todos
    epochs: int = Field(2, ge=1)
    step_size: float = Field(0.005, ge=0)
    mc_samples: int = Field(1, ge=1)
    seed: int = Field(0, ge=0, lt=2**64)
    threads: int = Field(1, ge=1)


class Stage2Config(BaseModel):
    model_config = ConfigDict(extra="forbid")

    individual_batch_size: int | None = Field(None, ge=1)
    epochs: int = Field(100, ge=0)
    step_size: float = Field(0.005, ge=0)
    mc_samples: int = Field(1, ge=1)
    seed: int = Field(0, ge=0, lt=2**64)
    ratio_hidden: tuple[int, int] = (64, 64)
    ratio_step_size: float = Field(0.005, ge=0)
    ratio_steps: int = Field(1, ge=0)
    generator_steps: int = Field(1, ge=0)
    # peso del termino reparametrizado -r(y_fake(theta), h1(theta)) del generador
    fake_weight: float = Field(1.0, ge=0)

    _pairs = field_validator("ratio_hidden", mode="before")(parse_pair)


@dataclass
class VariationalState:
    config: IcmConfig
    mu_z: np.ndarray
    log_sigma_z: np.ndarray
    mu_w: np.ndarray
    log_sigma_w: np.ndarray
    phi: SnpModelParams
    theta: TraitModelParams | None = None
    ratio: MlpParams | None = None
    ratio_spec: MlpSpec | None = None
    optim: dict[str, AdamState] = field(default_factory=dict)
    epochs_done: dict[str, int] = field(default_factory=lambda: {"stage1": 0, "stage2": 0})
    # filas (epoca, bloque, valor) para el archivo de metricas
    trace: list[tuple[int, str, float]] = field(default_factory=list)

    @property
    def N(self) -> int:
        return self.mu_z.shape[0]

    @property
    def M(self) -> int:
        return self.mu_w.shape[0]

    @property
    def z_mean(self) -> np.ndarray:
        """E_q[z_n], los confusores que usan los tests de asociacion."""
        return self.mu_z

    def optimizer(self, block: str, step_size: float) -> AdamState:
        state = self.optim.get(block)
        if state is None:
            state = self.optim[block] = AdamState(step_size=step_size)
        state.step_size = step_size
        return state

    def clamp(self):
        np.clip(self.log_sigma_z, LOG_SIGMA_MIN, LOG_SIGMA_MAX, out=self.log_sigma_z)
        np.clip(self.log_sigma_w, LOG_SIGMA_MIN, LOG_SIGMA_MAX, out=self.log_sigma_w)


def init_state(N: int, M: int, config: IcmConfig, seed: int) -> VariationalState:
    rng = RngStream(seed).spawn(0)
    scale = 0.1 * np.sqrt(2.0 / config.K)
    gen = rng.spawn(0).generator
    phi = init_snp_model(config, rng.spawn(1))
    if phi.kind == SnpModelKind.LOGISTIC_FA:
        phi.offset = np.zeros(M)
    return VariationalState(
        config=config,
        mu_z=scale * gen.standard_normal((N, config.K)),
        log_sigma_z=np.full((N, config.K), LOG_SIGMA_INIT),
        mu_w=scale * gen.standard_normal((M, config.K)),
        log_sigma_w=np.full((M, config.K), LOG_SIGMA_INIT),
        phi=phi,
    )


def reparam_sample(mu: np.ndarray, log_sigma: np.ndarray, rng: RngStream) -> tuple[np.ndarray, np.ndarray]:
    """mu + sigma * eps con eps ~ N(0, I); devuelve (muestra, eps)."""
    log_sigma = np.clip(log_sigma, LOG_SIGMA_MIN, LOG_SIGMA_MAX)
    noise = rng.generator.standard_normal(np.shape(mu))
    return mu + np.exp(log_sigma) * noise, noise


def gaussian_entropy_terms(
    mu: np.ndarray, log_sigma: np.ndarray, sample: np.ndarray
) -> tuple[float, np.ndarray, np.ndarray]:
    """
    log N(v; 0, I) - log N(v; mu, diag(sigma^2)) sumado sobre todas las
    entradas, con v = mu + sigma * eps, y sus gradientes respecto de mu y
    log_sigma a traves de la reparametrizacion.
    """
    sigma = np.exp(log_sigma)
    noise = (sample - mu) / sigma
    value = float(np.sum(-0.5 * sample * sample + 0.5 * noise * noise + log_sigma))
    grad_mu = -sample
    grad_log_sigma = -sample * sigma * noise + 1.0
    return value, grad_mu, grad_log_sigma
