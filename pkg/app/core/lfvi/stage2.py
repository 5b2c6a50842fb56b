"""
Etapa 2: modelo del rasgo theta por EM Monte Carlo con z' ~ q(z).

Con densidad tratable (location-shift, categorico) se asciende la
log-verosimilitud; con el rasgo implicito se alterna el entrenamiento del
estimador de razon y el ascenso del proxy r(y, h1) - r(y_fake, h1). No se submuestrean
SNPs: la verosimilitud del rasgo depende de todos.
"""

from collections.abc import Callable

import numpy as np
from loguru import logger

from app.core.errors import ConfigError, DimensionError, NumericError
from app.core.icm import (
    TraitKind,
    TraitModelParams,
    group_lasso_log_prior,
    init_trait_model,
    sample_trait_noise,
    trait_backward,
    trait_features,
    trait_features_backward,
    trait_log_prob,
    trait_pass,
    trait_predict_mean,
)
from app.core.lfvi.ratio import init_ratio, ratio_input_grads, ratio_loss, ratio_values
from app.core.lfvi.state import STAGE2, Stage2Config, VariationalState, reparam_sample
from app.core.numerics.mlp import MlpParams
from app.core.numerics.optim import adam_step
from app.core.numerics.rng import RngStream

EpochCallback = Callable[[VariationalState, int], None]


def _check_data(X: np.ndarray, y: np.ndarray, state: VariationalState) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    if X.shape != (state.N, state.M) or y.shape != (state.N,):
        raise DimensionError(f"X {X.shape} / y {y.shape} no coinciden con el estado {(state.N, state.M)}")
    return y


def _ensure_theta(state: VariationalState, config: Stage2Config) -> TraitModelParams:
    if state.theta is None:
        state.theta = init_trait_model(state.config, state.M, RngStream(config.seed).spawn(0, STAGE2))
    return state.theta


def _batches(N: int, config: Stage2Config, rng: RngStream) -> list[np.ndarray]:
    size = config.individual_batch_size
    if not size or size >= N:
        return [np.arange(N)]
    order = rng.generator.permutation(N)
    return [np.sort(order[s:s + size]) for s in range(0, N, size)]


def stage2_objective(
    theta: TraitModelParams,
    X: np.ndarray,
    y: np.ndarray,
    z: np.ndarray,
    scale: float,
    lasso_scale: float,
) -> tuple[float, dict[str, np.ndarray]]:
    """scale * sum_n log p(y_n | x_n, z_n, theta) + log p(theta) y su gradiente."""
    n = X.shape[0]
    score, _, cache = trait_pass(X, z, np.zeros(n), theta, training=True)
    log_prob, grad_score = trait_log_prob(y, score, theta)
    grads = trait_backward(cache, scale * grad_score)
    prior, prior_grads = group_lasso_log_prior(theta, lasso_scale)
    for name, g in prior_grads.items():
        grads[name] = grads[name] + g
    return float(scale * log_prob.sum() + prior), grads


def stage2_fit_tractable(
    X: np.ndarray,
    y: np.ndarray,
    state: VariationalState,
    config: Stage2Config,
    on_epoch: EpochCallback | None = None,
) -> TraitModelParams:
    if state.config.trait_kind == TraitKind.REAL_IMPLICIT:
        raise ConfigError("El rasgo implicito no tiene densidad tratable; usar stage2_fit_lfvi")
    y = _check_data(X, y, state)
    theta = _ensure_theta(state, config)
    root = RngStream(config.seed)
    N = state.N

    for epoch in range(state.epochs_done["stage2"], config.epochs):
        rng = root.spawn(STAGE2, epoch)
        values = []
        for idx in _batches(N, config, rng):
            X_b = np.asarray(X[idx], dtype=np.float64)
            scale = N / len(idx)
            grads: dict[str, np.ndarray] = {}
            value = 0.0
            for _ in range(config.mc_samples):
                z, _ = reparam_sample(state.mu_z[idx], state.log_sigma_z[idx], rng)
                v, g = stage2_objective(theta, X_b, y[idx], z, scale, state.config.group_lasso_scale)
                value += v / config.mc_samples
                for name, arr in g.items():
                    grads[name] = grads.get(name, 0.0) + arr / config.mc_samples
            if not np.isfinite(value):
                raise NumericError("Objetivo de etapa 2 no finito", block="theta", snapshot=state)
            adam_step(state.optimizer("theta", config.step_size), theta.weights, {k: -g for k, g in grads.items()})
            values.append(value)

        mean_value = float(np.mean(values))
        state.trace.append((epoch, "stage2_objective", mean_value))
        state.epochs_done["stage2"] = epoch + 1
        logger.debug("Etapa 2 epoca {}: objetivo {:.3f}", epoch, mean_value)
        if on_epoch is not None:
            on_epoch(state, epoch)
    logger.info("Etapa 2 (tratable) terminada tras {} epocas", state.epochs_done["stage2"])
    return theta


def _ensure_ratio(state: VariationalState, config: Stage2Config, hidden1_dim: int) -> MlpParams:
    if state.ratio is None:
        state.ratio, state.ratio_spec = init_ratio(
            hidden1_dim, config.ratio_hidden, RngStream(config.seed).spawn(0, STAGE2, 1)
        )
    return state.ratio


def proxy_gradients(
    state: VariationalState, config: Stage2Config, X_b: np.ndarray, y_b: np.ndarray, z: np.ndarray,
    scale: float, rng: RngStream,
) -> tuple[float, dict[str, np.ndarray]]:
    """
    Proxy de la log-verosimilitud con el estimador fijo,

        scale * [sum_n r(y_n, h1_n) - fake_weight * sum_n r(y_fake_n, h1_n)],

    y su gradiente respecto de theta. Entra por h1 (pasada sin ruido) y por
    y_fake, reparametrizado con ruido fresco.
    """
    theta, ratio, spec = state.theta, state.ratio, state.ratio_spec
    h1, feature_cache = trait_features(X_b, z, theta)
    noise = sample_trait_noise(theta.trait_kind, X_b.shape[0], rng)
    y_fake, _, fake_cache = trait_pass(X_b, z, noise, theta, training=True)

    _, d_h1 = ratio_input_grads(ratio, spec, y_b, h1, scale)
    d_fake, d_h1_fake = ratio_input_grads(ratio, spec, y_fake, h1, -config.fake_weight * scale)
    grads = trait_backward(fake_cache, d_fake)
    for name, g in trait_features_backward(feature_cache, d_h1 + d_h1_fake).items():
        grads[name] = grads[name] + g

    value = ratio_values(ratio, spec, y_b, h1).sum()
    value -= config.fake_weight * ratio_values(ratio, spec, y_fake, h1).sum()
    return float(scale * value), grads


def _generator_step(
    state: VariationalState, config: Stage2Config, X_b: np.ndarray, y_b: np.ndarray, z: np.ndarray,
    scale: float, rng: RngStream,
) -> float:
    theta = state.theta
    value, grads = proxy_gradients(state, config, X_b, y_b, z, scale, rng)
    prior, prior_grads = group_lasso_log_prior(theta, state.config.group_lasso_scale)
    for name, g in prior_grads.items():
        grads[name] = grads[name] + g
    adam_step(state.optimizer("theta", config.step_size), theta.weights, {k: -g for k, g in grads.items()})
    return value + prior


def stage2_fit_lfvi(
    X: np.ndarray,
    y: np.ndarray,
    state: VariationalState,
    config: Stage2Config,
    on_epoch: EpochCallback | None = None,
) -> tuple[TraitModelParams, MlpParams]:
    """
    Alterna config.ratio_steps pasos del estimador de razon y
    config.generator_steps pasos de theta por lote. Aborta con NumericError
    (y el estado adjunto) si la perdida del estimador deja de ser finita.
    """
    if state.config.trait_kind != TraitKind.REAL_IMPLICIT:
        raise ConfigError(f"stage2_fit_lfvi es para el rasgo implicito, no {state.config.trait_kind.value}")
    y = _check_data(X, y, state)
    theta = _ensure_theta(state, config)
    root = RngStream(config.seed)
    N = state.N

    for epoch in range(state.epochs_done["stage2"], config.epochs):
        rng = root.spawn(STAGE2, epoch)
        losses, proxies = [], []
        for idx in _batches(N, config, rng):
            X_b = np.asarray(X[idx], dtype=np.float64)
            y_b = y[idx]
            z, _ = reparam_sample(state.mu_z[idx], state.log_sigma_z[idx], rng)
            scale = N / len(idx)

            for _ in range(config.ratio_steps):
                h1, _ = trait_features(X_b, z, theta)
                noise = sample_trait_noise(theta.trait_kind, len(idx), rng)
                y_fake, _, _ = trait_pass(X_b, z, noise, theta)
                ratio = _ensure_ratio(state, config, h1.shape[1])
                loss = ratio_loss(ratio, state.ratio_spec, y_b, y_fake, h1)
                if not np.isfinite(loss.value):
                    raise NumericError("Perdida del estimador de razon no finita", block="ratio", snapshot=state)
                adam_step(state.optimizer("ratio", config.ratio_step_size), ratio.weights, loss.grads)
                losses.append(loss.value)

            if state.ratio is None:
                # sin pasos del estimador r queda en cero y theta solo sigue al prior
                h1, _ = trait_features(X_b, z, theta)
                _ensure_ratio(state, config, h1.shape[1])
            for _ in range(config.generator_steps):
                proxies.append(_generator_step(state, config, X_b, y_b, z, scale, rng))

        if losses:
            state.trace.append((epoch, "ratio_loss", float(np.mean(losses))))
        if proxies:
            state.trace.append((epoch, "proxy_objective", float(np.mean(proxies))))
        state.epochs_done["stage2"] = epoch + 1
        logger.debug("Etapa 2 (LFVI) epoca {}: perdida de razon {:.4f}", epoch, np.mean(losses) if losses else float("nan"))
        if on_epoch is not None:
            on_epoch(state, epoch)
    logger.info("Etapa 2 (LFVI) terminada tras {} epocas", state.epochs_done["stage2"])
    return theta, state.ratio


def stage2_fit(X: np.ndarray, y: np.ndarray, state: VariationalState, config: Stage2Config, on_epoch=None):
    """Elige la ruta tratable o la de LFVI segun el tipo de rasgo."""
    if state.config.trait_kind == TraitKind.REAL_IMPLICIT:
        return stage2_fit_lfvi(X, y, state, config, on_epoch)[0]
    return stage2_fit_tractable(X, y, state, config, on_epoch)


def predictive_mse(X: np.ndarray, y: np.ndarray, state: VariationalState, seed: int = 0) -> float:
    """Error cuadratico medio del rasgo frente a su media predictiva con z = E_q[z]."""
    mean = trait_predict_mean(
        np.asarray(X, dtype=np.float64), state.z_mean, state.theta, RngStream(seed).spawn(STAGE2, 2**32)
    )
    return float(np.mean((np.asarray(y, dtype=np.float64) - mean) ** 2))
