"""
Estudio replicado de precision: simular -> etapa 1 -> tests por metodo -> precision.

Cada replica usa un flujo derivado de (seed, configuracion, replica), asi que
agregar replicas no cambia las anteriores y el numero de hilos no cambia el
resultado.
"""

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from loguru import logger
from pydantic import BaseModel, ConfigDict, Field, field_validator

from app.core.errors import ConfigError, IcmError
from app.core.icm import IcmConfig
from app.core.lfvi.stage1 import stage1_fit
from app.core.lfvi.stage2 import stage2_fit
from app.core.lfvi.state import Stage1Config, Stage2Config
from app.core.numerics.rng import RngStream
from app.services import assoc
from app.services.simgen import PRESETS, preset, simulate_dataset

METHODS = ("icm", "pca", "uncorrected", "nn")

# Precision publicada (%) a escala completa, 100 replicas por configuracion
REFERENCE_PRECISION: dict[str, dict[str, float]] = {
    "hapmap": {"icm": 99.2, "pca": 34.8, "lmm": 30.7, "gcat": 99.2},
    "tgp": {"icm": 85.6, "pca": 2.7, "lmm": 43.3, "gcat": 70.3},
    "hgdp": {"icm": 91.8, "pca": 6.8, "lmm": 40.2, "gcat": 72.3},
    "psd:1": {"icm": 97.0, "pca": 80.4, "lmm": 92.3, "gcat": 95.3},
    "psd:0.5": {"icm": 94.3, "pca": 79.5, "lmm": 90.1, "gcat": 93.6},
    "psd:0.1": {"icm": 92.2, "pca": 38.1, "lmm": 38.6, "gcat": 90.4},
    "psd:0.01": {"icm": 92.7, "pca": 24.2, "lmm": 35.1, "gcat": 90.7},
    "spatial:1": {"icm": 90.9, "pca": 56.4, "lmm": 60.0, "gcat": 75.2},
    "spatial:0.5": {"icm": 86.2, "pca": 50.5, "lmm": 46.6, "gcat": 72.5},
    "spatial:0.1": {"icm": 80.9, "pca": 2.4, "lmm": 26.6, "gcat": 35.6},
    "spatial:0.01": {"icm": 75.5, "pca": 1.8, "lmm": 15.3, "gcat": 30.2},
}


def parse_configuration(label: str) -> tuple[str, float]:
    """'psd:0.1' -> ('psd', 0.1); sin ':' usa a = 1."""
    name, _, a = label.partition(":")
    if name not in PRESETS:
        raise ConfigError(f"Configuracion desconocida: {name} (opciones: {', '.join(PRESETS)})")
    try:
        return name, float(a) if a else 1.0
    except ValueError:
        raise ConfigError(f"Valor de a invalido en '{label}'") from None


def reference_key(name: str, a: float) -> str:
    if name in ("hapmap", "tgp", "hgdp"):
        return name
    return f"{name}:{a:g}"


def _split(value):
    if isinstance(value, str):
        return [v.strip() for v in value.split(",") if v.strip()]
    return value


class StudyConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    configurations: list[str] = ["psd:0.1", "spatial:0.1"]
    replicates: int = Field(10, ge=0)
    methods: list[str] = ["icm", "pca", "uncorrected"]
    M: int = Field(5000, ge=1)
    N: int = Field(500, ge=2)
    n_causal: int = Field(10, ge=0)
    K: int = Field(3, ge=1)
    K_pc: int = Field(3, ge=0)
    threshold: float = Field(assoc.DEFAULT_THRESHOLD, gt=0, le=1)
    seed: int = Field(0, ge=0, lt=2**64)
    threads: int = Field(1, ge=1)
    stage1: Stage1Config = Stage1Config(epochs=100, step_size=0.05)
    stage2: Stage2Config = Stage2Config()
    icm: IcmConfig = IcmConfig()

    _lists = field_validator("configurations", "methods", mode="before")(_split)

    @field_validator("methods")
    @classmethod
    def _known_methods(cls, v: list[str]) -> list[str]:
        unknown = [m for m in v if m not in METHODS]
        if unknown:
            raise ValueError(f"Metodos desconocidos: {unknown} (opciones: {', '.join(METHODS)})")
        return v

    @field_validator("configurations")
    @classmethod
    def _known_configurations(cls, v: list[str]) -> list[str]:
        for label in v:
            parse_configuration(label)
        return v


@dataclass
class ReplicateResult:
    configuration: str
    replicate: int
    seed: int
    precision: dict[str, float] = field(default_factory=dict)
    discoveries: dict[str, int] = field(default_factory=dict)
    lambda_gc: dict[str, float] = field(default_factory=dict)
    error: str | None = None
    exit_code: int = 0


@dataclass
class SummaryRow:
    configuration: str
    method: str
    mean: float
    stderr: float | None
    defined: int
    undefined: int
    failed: int
    reference: float | None


@dataclass
class StudyResult:
    replicates: list[ReplicateResult]
    summary: list[SummaryRow]

    @property
    def failures(self) -> list[ReplicateResult]:
        return [r for r in self.replicates if r.error is not None]


def replicate_seed(seed: int, config_index: int, replicate: int) -> int:
    return RngStream(seed).spawn(config_index, replicate).integer_seed()


def run_replicate(config: StudyConfig, label: str, config_index: int, replicate: int) -> ReplicateResult:
    seed = replicate_seed(config.seed, config_index, replicate)
    result = ReplicateResult(label, replicate, seed)
    name, a = parse_configuration(label)
    try:
        sim = preset(name, a, M=config.M, N=config.N, n_causal=config.n_causal)
        data = simulate_dataset(sim, seed)
        X, y = data.genotypes, data.traits

        icm_config = config.icm.model_copy(update={"K": config.K})
        stage1 = config.stage1.model_copy(update={"seed": seed})
        state = stage1_fit(X, icm_config, stage1)

        for method in config.methods:
            match method:
                case "icm":
                    res = assoc.test_corrected(y, X, state.z_mean, config.threshold)
                case "pca":
                    res = assoc.test_pca_baseline(y, X, config.K_pc, config.threshold, RngStream(seed).spawn(7))
                case "uncorrected":
                    res = assoc.test_uncorrected(y, X, config.threshold)
                case "nn":
                    stage2_fit(X, y, state, config.stage2.model_copy(update={"seed": seed}))
                    res = assoc.test_nn_ranking(state.theta, top_k=max(config.n_causal, 1))
            result.precision[method] = assoc.precision(res, data.causal_set)
            result.discoveries[method] = int(res.significant_set.size)
            if method != "nn":
                result.lambda_gc[method], _ = assoc.genomic_control(res)
        logger.info("{} replica {}: {}", label, replicate,
                    ", ".join(f"{m}={p:.3f}" for m, p in result.precision.items()))
    except IcmError as e:
        logger.error("{} replica {} fallo: {}", label, replicate, e)
        result.error, result.exit_code = str(e), e.exit_code
    except (ValueError, ArithmeticError) as e:
        logger.error("{} replica {} fallo: {}", label, replicate, e)
        result.error, result.exit_code = str(e), 2
    return result


def summarize(config: StudyConfig, replicates: list[ReplicateResult]) -> list[SummaryRow]:
    rows = []
    for label in config.configurations:
        name, a = parse_configuration(label)
        reference = REFERENCE_PRECISION.get(reference_key(name, a), {})
        mine = [r for r in replicates if r.configuration == label]
        failed = sum(r.error is not None for r in mine)
        for method in config.methods:
            values = [r.precision[method] for r in mine if method in r.precision]
            defined = [v for v in values if not math.isnan(v)]
            mean = float(np.mean(defined)) if defined else math.nan
            stderr = float(np.std(defined, ddof=1) / np.sqrt(len(defined))) if len(defined) > 1 else None
            ref = reference.get(method)
            rows.append(SummaryRow(
                label, method, mean, stderr, len(defined), len(values) - len(defined), failed,
                None if ref is None else ref / 100.0,
            ))
    return rows


def run_replicated_study(config: StudyConfig) -> StudyResult:
    """Tabla de precision media (y error estandar) por configuracion y metodo."""
    tasks = [
        (label, ci, r)
        for ci, label in enumerate(config.configurations)
        for r in range(config.replicates)
    ]
    logger.info("Estudio: {} configuraciones x {} replicas", len(config.configurations), config.replicates)
    if config.threads > 1 and len(tasks) > 1:
        with ThreadPoolExecutor(max_workers=config.threads) as pool:
            replicates = list(pool.map(lambda t: run_replicate(config, *t), tasks))
    else:
        replicates = [run_replicate(config, *t) for t in tasks]

    result = StudyResult(replicates, summarize(config, replicates))
    if result.failures:
        logger.warning("{} replicas fallaron", len(result.failures))
    return result
