"""
Etapa 1: confusores z, variables por SNP w y modelo de SNPs phi, con
gradientes reparametrizados y submuestreo de SNPs. Nunca lee el rasgo.
"""

from collections.abc import Callable
from dataclasses import dataclass

import numpy as np
from loguru import logger

from app.core.errors import DimensionError, NumericError
from app.core.icm import IcmConfig, allele_logits, log_prior_phi, snp_loglik
from app.core.lfvi.state import (
    STAGE1,
    Stage1Config,
    VariationalState,
    gaussian_entropy_terms,
    init_state,
)
from app.core.numerics.optim import adam_step
from app.core.numerics.rng import RngStream

EpochCallback = Callable[[VariationalState, int, float], None]


@dataclass
class Stage1Noise:
    """Ruido congelado de una muestra: eps_z (lote de individuos) y eps_w (lote de SNPs)."""

    z: np.ndarray
    w: np.ndarray


@dataclass
class Stage1Objective:
    value: float
    elbo: float
    grads: dict[str, np.ndarray]


def stage1_objective(
    X_batch: np.ndarray,
    state: VariationalState,
    snp_idx: np.ndarray,
    ind_idx: np.ndarray,
    noise: Stage1Noise,
    threads: int = 1,
) -> Stage1Objective:
    """
    Objetivo Monte Carlo de la etapa 1 con ruido fijo y su gradiente exacto.

    value = (M/|B|) * sum loglik + sum_B (log p - log q)(w) + sum_I (log p - log q)(z) + log p(phi)

    Solo el termino de verosimilitud se escala. El logit base por SNP (si el
    modelo lo tiene) sigue la escala de la verosimilitud de w, con prior plano. Con |I| < N la verosimilitud y
    el prior de phi se escalan ademas por N/|I| para los gradientes de w y phi.
    `elbo` es el estimador insesgado del ELBO completo.
    """
    M, N = state.M, state.N
    b, n = len(snp_idx), len(ind_idx)
    if X_batch.shape != (n, b):
        raise DimensionError(f"Lote de genotipos {X_batch.shape}, se esperaba {(n, b)}")
    snp_scale = M / b
    ind_scale = N / n

    mu_z, ls_z = state.mu_z[ind_idx], state.log_sigma_z[ind_idx]
    mu_w, ls_w = state.mu_w[snp_idx], state.log_sigma_w[snp_idx]
    sig_z, sig_w = np.exp(ls_z), np.exp(ls_w)
    z = mu_z + sig_z * noise.z
    w = mu_w + sig_w * noise.w

    offset = None if state.phi.offset is None else state.phi.offset[snp_idx]
    lik = snp_loglik(X_batch, z, w, state.phi, threads=threads, offset=offset)
    ent_z, gmu_z, gls_z = gaussian_entropy_terms(mu_z, ls_z, z)
    ent_w, gmu_w, gls_w = gaussian_entropy_terms(mu_w, ls_w, w)
    prior_phi, g_phi = log_prior_phi(state.phi)

    # w y phi son globales para los individuos: escalan por N/|I|
    shared = snp_scale * ind_scale
    gz = snp_scale * lik.grad_z
    gw = shared * lik.grad_w
    grads = {
        "mu_z": gz + gmu_z,
        "log_sigma_z": gz * sig_z * noise.z + gls_z,
        "mu_w": gw + ind_scale * gmu_w,
        "log_sigma_w": gw * sig_w * noise.w + ind_scale * gls_w,
    }
    for name, g in lik.grad_phi.items():
        grads[f"phi.{name}"] = shared * g + ind_scale * g_phi[name]
    if lik.grad_offset is not None:
        grads["offset"] = shared * lik.grad_offset

    value = snp_scale * lik.value + ent_w + ent_z + prior_phi
    elbo = shared * lik.value + snp_scale * ent_w + ind_scale * ent_z + prior_phi
    if not np.isfinite(value):
        raise NumericError("Objetivo de etapa 1 no finito", block="stage1")
    return Stage1Objective(value, elbo, grads)


def _draw_noise(rng: RngStream, n: int, b: int, K: int) -> Stage1Noise:
    gen = rng.generator
    return Stage1Noise(z=gen.standard_normal((n, K)), w=gen.standard_normal((b, K)))


def stage1_step(
    X_batch: np.ndarray,
    state: VariationalState,
    config: Stage1Config,
    rng: RngStream,
    snp_idx: np.ndarray,
    ind_idx: np.ndarray | None = None,
) -> float:
    """
    Un paso de Adam (ascenso) sobre q(w) y el logit base de los SNPs del lote,
    phi y q(z) de los individuos del lote. Devuelve la estimacion insesgada del ELBO.
    """
    if ind_idx is None:
        ind_idx = np.arange(state.N)
    K = state.config.K

    grads: dict[str, np.ndarray] = {}
    elbo = 0.0
    for _ in range(config.mc_samples):
        noise = _draw_noise(rng, len(ind_idx), len(snp_idx), K)
        obj = stage1_objective(X_batch, state, snp_idx, ind_idx, noise, threads=config.threads)
        elbo += obj.elbo / config.mc_samples
        for name, g in obj.grads.items():
            grads[name] = grads.get(name, 0.0) + g / config.mc_samples

    step = config.step_size
    adam_step(
        state.optimizer("z", step),
        {"mu_z": state.mu_z, "log_sigma_z": state.log_sigma_z},
        {"mu_z": -grads["mu_z"], "log_sigma_z": -grads["log_sigma_z"]},
        rows=ind_idx,
    )
    adam_step(
        state.optimizer("w", step),
        {"mu_w": state.mu_w, "log_sigma_w": state.log_sigma_w},
        {"mu_w": -grads["mu_w"], "log_sigma_w": -grads["log_sigma_w"]},
        rows=snp_idx,
    )
    if "offset" in grads:
        adam_step(
            state.optimizer("offset", step), {"offset": state.phi.offset}, {"offset": -grads["offset"]}, rows=snp_idx
        )
    phi_grads = {k.removeprefix("phi."): -g for k, g in grads.items() if k.startswith("phi.")}
    if phi_grads:
        adam_step(state.optimizer("phi", step), state.phi.weights, phi_grads)
    state.clamp()
    return elbo


def stage1_fit(
    X: np.ndarray,
    icm_config: IcmConfig,
    config: Stage1Config,
    state: VariationalState | None = None,
    on_epoch: EpochCallback | None = None,
) -> VariationalState:
    """
    Recorre los SNPs en lotes barajados durante config.epochs epocas.

    Un estado nuevo arranca con el logit base de cada SNP en su frecuencia
    alelica observada. La aleatoriedad de cada epoca sale de (seed, etapa, epoca), asi que un
    estado reanudado desde checkpoint continua exactamente igual.
    """
    N, M = X.shape
    if state is None:
        state = init_state(N, M, icm_config, config.seed)
        if state.phi.offset is not None:
            state.phi.offset[:] = allele_logits(X)
    elif (state.N, state.M) != (N, M):
        raise DimensionError(f"Estado para {(state.N, state.M)}, datos {(N, M)}")

    root = RngStream(config.seed)
    b = min(config.snp_batch_size, M)
    for epoch in range(state.epochs_done["stage1"], config.epochs):
        rng = root.spawn(STAGE1, epoch)
        order = rng.generator.permutation(M)
        elbos = []
        for start in range(0, M, b):
            snp_idx = np.sort(order[start:start + b])
            ind_idx = None
            if config.individual_batch_size and config.individual_batch_size < N:
                ind_idx = np.sort(rng.generator.choice(N, config.individual_batch_size, replace=False))
            X_batch = np.asarray(X[:, snp_idx])
            if ind_idx is not None:
                X_batch = X_batch[ind_idx]
            elbos.append(stage1_step(X_batch, state, config, rng, snp_idx, ind_idx))
            logger.debug("Etapa 1 epoca {} lote {}: ELBO {:.3f}", epoch, start // b, elbos[-1])

        mean_elbo = float(np.mean(elbos))
        state.trace.append((epoch, "stage1_elbo", mean_elbo))
        state.epochs_done["stage1"] = epoch + 1
        logger.info("Etapa 1 epoca {}/{}: ELBO medio {:.3f}", epoch + 1, config.epochs, mean_elbo)
        if on_epoch is not None:
            on_epoch(state, epoch, mean_elbo)
    return state
