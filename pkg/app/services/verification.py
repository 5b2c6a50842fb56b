"""
Suite de verificacion de gradientes: cada operacion diferenciable contra
diferencias centrales sobre instancias aleatorias bien condicionadas.
"""

from collections.abc import Callable
from dataclasses import dataclass

import numpy as np
from loguru import logger

from app.core.icm import (
    IcmConfig,
    SnpModelKind,
    TraitKind,
    TraitModelKind,
    group_lasso_log_prior,
    init_snp_model,
    init_trait_model,
    snp_log_prob,
    trait_pass,
)
from app.core.lfvi.ratio import init_ratio, ratio_inputs, ratio_loss
from app.core.lfvi.stage1 import Stage1Noise, stage1_objective
from app.core.lfvi.stage2 import stage2_objective
from app.core.lfvi.state import gaussian_entropy_terms, init_state
from app.core.numerics.gradcheck import LossFn, gradient_check
from app.core.numerics.mlp import MlpCache, MlpSpec, he_init, mlp_backward, mlp_forward
from app.core.numerics.rng import RngStream

TOLERANCE = 1e-5
# margen minimo a los quiebres de ReLU y magnitud minima de un gradiente no nulo
KINK_MARGIN = 1e-4
MIN_GRADIENT = 1e-4
MAX_DRAWS = 50

Instance = tuple[LossFn, dict[str, np.ndarray], bool]
Builder = Callable[[RngStream], Instance]


def _margin(cache: MlpCache) -> float:
    return min(float(np.abs(layer.post).min()) for layer in cache.layers)


def _well_scaled(grads: dict[str, np.ndarray]) -> bool:
    for g in grads.values():
        nonzero = np.abs(g[g != 0])
        if nonzero.size and nonzero.min() < MIN_GRADIENT:
            return False
    return True


def mlp_instance(rng: RngStream) -> Instance:
    """Red con batch-norm y conexion directa; la perdida usa salida y primera capa oculta."""
    gen = rng.generator
    spec = MlpSpec(input_dim=5, hidden_dims=(6, 7), output_dim=2, use_batch_norm=True,
                   skip_inputs_to_output=True, skip_range=(1, 4))
    net = he_init(spec, rng)
    for name in net.weights:
        if name.startswith(("gamma", "beta", "b")):
            net.weights[name] = gen.normal(0.5 if name.startswith("gamma") else 0.0, 0.3, net.weights[name].shape)
    params = dict(net.weights)
    params["input"] = gen.standard_normal((8, spec.input_dim))
    proj_out = gen.standard_normal((8, spec.output_dim))
    proj_h1 = gen.standard_normal((8, spec.hidden_dims[0]))
    last: dict[str, MlpCache] = {}

    def loss(p):
        net.weights.update({k: v for k, v in p.items() if k != "input"})
        out, h1, cache = mlp_forward(net, spec, p["input"], training=True)
        last["cache"] = cache
        grads, d_in = mlp_backward(cache, proj_out, proj_h1)
        grads["input"] = d_in
        return float((out * proj_out).sum() + (h1 * proj_h1).sum()), grads

    _, grads = loss(params)
    return loss, params, _margin(last["cache"]) > KINK_MARGIN and _well_scaled(grads)


def snp_log_prob_instance(rng: RngStream) -> Instance:
    gen = rng.generator
    x = gen.integers(0, 3, 12)
    params = {"logit": 3.0 * gen.standard_normal(12)}

    def loss(p):
        value, grad = snp_log_prob(x, p["logit"])
        return float(value.sum()), {"logit": grad}

    _, grads = loss(params)
    return loss, params, _well_scaled(grads)


def group_lasso_instance(rng: RngStream) -> Instance:
    config = IcmConfig(K=2, trait_hidden=(4, 3), trait_model=TraitModelKind.NEURAL)
    theta = init_trait_model(config, 5, rng)
    params = theta.weights

    def loss(p):
        return group_lasso_log_prior(theta, 0.7)

    _, grads = loss(params)
    return loss, params, _well_scaled(grads)


def entropy_instance(rng: RngStream) -> Instance:
    gen = rng.generator
    noise = gen.standard_normal((4, 3))
    params = {"mu": gen.standard_normal((4, 3)), "log_sigma": gen.uniform(-1.0, 0.5, (4, 3))}

    def loss(p):
        sample = p["mu"] + np.exp(p["log_sigma"]) * noise
        value, g_mu, g_ls = gaussian_entropy_terms(p["mu"], p["log_sigma"], sample)
        return value, {"mu": g_mu, "log_sigma": g_ls}

    _, grads = loss(params)
    return loss, params, _well_scaled(grads)


def ratio_loss_instance(rng: RngStream) -> Instance:
    gen = rng.generator
    net, spec = init_ratio(3, (5, 5), rng)
    for name in ("b1", "b2"):
        net.weights[name] = gen.normal(0.0, 0.3, net.weights[name].shape)
    net.weights["W3"] = gen.uniform(-1.0, 1.0, net.weights["W3"].shape)
    y_real, y_fake = gen.standard_normal(6), gen.standard_normal(6)
    h1 = np.abs(gen.standard_normal((6, 3)))
    params = net.weights

    def loss(p):
        result = ratio_loss(net, spec, y_real, y_fake, h1)
        return result.value, result.grads

    _, grads = loss(params)
    margins = [
        _margin(mlp_forward(net, spec, ratio_inputs(y, h1))[2]) for y in (y_real, y_fake)
    ]
    return loss, params, min(margins) > KINK_MARGIN and _well_scaled(grads)


def stage1_instance(rng: RngStream, snp_model: SnpModelKind = SnpModelKind.LOGISTIC_FA) -> Instance:
    """4 individuos, 3 SNPs, K = 2 con ruido congelado."""
    gen = rng.generator
    config = IcmConfig(K=2, snp_model=snp_model, snp_hidden=(5, 4))
    state = init_state(4, 3, config, seed=int(gen.integers(0, 2**31)))
    state.mu_z[:] = gen.standard_normal(state.mu_z.shape)
    state.mu_w[:] = gen.standard_normal(state.mu_w.shape)
    state.log_sigma_z[:] = gen.uniform(-1.5, -0.5, state.log_sigma_z.shape)
    state.log_sigma_w[:] = gen.uniform(-1.5, -0.5, state.log_sigma_w.shape)
    if state.phi.offset is not None:
        state.phi.offset[:] = gen.normal(0.0, 1.0, 3)
    if snp_model == SnpModelKind.NEURAL:
        state.phi = init_snp_model(config, rng.spawn(1))
        for name in ("b1", "b2"):
            state.phi.weights[name] = gen.normal(0.0, 0.3, state.phi.weights[name].shape)
    X = gen.integers(0, 3, (4, 3)).astype(np.uint8)
    noise = Stage1Noise(z=gen.standard_normal((4, 2)), w=gen.standard_normal((3, 2)))
    ind, snp = np.arange(4), np.arange(3)

    params = {
        "mu_z": state.mu_z, "log_sigma_z": state.log_sigma_z,
        "mu_w": state.mu_w, "log_sigma_w": state.log_sigma_w,
    }
    params.update({f"phi.{k}": v for k, v in state.phi.weights.items()})
    if state.phi.offset is not None:
        params["offset"] = state.phi.offset

    def loss(p):
        obj = stage1_objective(X, state, snp, ind, noise)
        return obj.value, obj.grads

    _, grads = loss(params)
    ok = _well_scaled(grads)
    if snp_model == SnpModelKind.NEURAL:
        z = state.mu_z + np.exp(state.log_sigma_z) * noise.z
        w = state.mu_w + np.exp(state.log_sigma_w) * noise.w
        pairs = np.concatenate([np.repeat(z, 3, axis=0), np.tile(w, (4, 1))], axis=1)
        ok = ok and _margin(mlp_forward(state.phi.phi, state.phi.spec, pairs)[2]) > KINK_MARGIN
    return loss, params, ok


def stage2_instance(rng: RngStream) -> Instance:
    gen = rng.generator
    config = IcmConfig(K=2, trait_hidden=(4, 3), trait_kind=TraitKind.REAL_LOCATION_SHIFT)
    theta = init_trait_model(config, 5, rng)
    for name in ("b1", "b2"):
        theta.weights[name] = gen.normal(0.0, 0.3, theta.weights[name].shape)
    X = gen.integers(0, 3, (6, 5)).astype(np.float64)
    z = gen.standard_normal((6, 2))
    y = gen.standard_normal(6)
    params = theta.weights

    def loss(p):
        return stage2_objective(theta, X, y, z, 2.0, 0.5)

    _, grads = loss(params)
    _, _, cache = trait_pass(X, z, np.zeros(6), theta)
    return loss, params, _margin(cache.mlp) > KINK_MARGIN and _well_scaled(grads)


OPERATIONS: dict[str, Builder] = {
    "mlp_backward": mlp_instance,
    "snp_log_prob": snp_log_prob_instance,
    "group_lasso_log_prior": group_lasso_instance,
    "gaussian_entropy_terms": entropy_instance,
    "ratio_loss": ratio_loss_instance,
    "stage1_objective": stage1_instance,
    "stage1_objective_neural": lambda rng: stage1_instance(rng, SnpModelKind.NEURAL),
    "stage2_objective": stage2_instance,
}


@dataclass
class GradcheckReport:
    operation: str
    instances: int
    max_error: float

    @property
    def passed(self) -> bool:
        return self.max_error <= TOLERANCE


def well_conditioned(builder: Builder, rng: RngStream) -> tuple[LossFn, dict[str, np.ndarray]]:
    """Sortea instancias hasta una sin quiebres de ReLU cercanos ni gradientes diminutos."""
    for draw in range(MAX_DRAWS):
        loss, params, ok = builder(rng.spawn(draw))
        if ok:
            return loss, params
    return loss, params


def run_suite(instances: int = 20, seed: int = 0, operations: list[str] | None = None) -> list[GradcheckReport]:
    root = RngStream(seed)
    reports = []
    for op_index, name in enumerate(operations or OPERATIONS):
        builder = OPERATIONS[name]
        worst = 0.0
        for i in range(instances):
            loss, params = well_conditioned(builder, root.spawn(op_index, i))
            worst = max(worst, gradient_check(loss, params))
        reports.append(GradcheckReport(name, instances, worst))
        logger.info("gradcheck {}: error relativo maximo {:.2e}", name, worst)
    return reports
