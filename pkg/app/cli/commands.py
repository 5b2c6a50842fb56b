"""
Comandos del CLI: simulate, fit, assoc, study y gradcheck.

Los parametros salen de un archivo `clave = valor` (--config), sobreescritos por
los flags de linea de comandos; lo no indicado toma el valor por defecto de
RunConfig.
"""

import argparse
from pathlib import Path

import numpy as np
from loguru import logger
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from app.cli.formatters import assoc_summary, dataset_summary, format_float, table_to_text
from app.config import settings
from app.core.errors import ConfigError, IcmError, StorageError
from app.core.icm import IcmConfig, SnpModelKind, TraitKind, TraitModelKind, parse_pair
from app.core.lfvi.stage1 import stage1_fit
from app.core.lfvi.stage2 import stage2_fit
from app.core.lfvi.state import Stage1Config, Stage2Config, VariationalState
from app.core.numerics.rng import RngStream
from app.core.storage import (
    DatasetFile,
    TruthBlock,
    load_checkpoint,
    load_dataset,
    save_checkpoint,
    save_dataset,
    write_metrics,
    write_text,
    write_tsv,
)
from app.services import assoc
from app.services.simgen import Family, SimConfig, simulate_dataset
from app.services.study import METHODS, REFERENCE_PRECISION, StudyConfig, run_replicated_study
from app.services.verification import run_suite

DATASET_FILE = "dataset.icmg"
CHECKPOINT_FILE = "checkpoint.npz"
METRICS_FILE = "metrics.tsv"


def _split(value):
    if isinstance(value, str):
        return [v.strip() for v in value.split(",") if v.strip()]
    return value


class RunConfig(BaseModel):
    """Parametros de todos los comandos; las claves desconocidas se rechazan."""

    model_config = ConfigDict(extra="forbid")

    # simulacion
    family: Family = Family.PSD
    a: float = Field(0.1, gt=0)
    M: int = Field(5000, ge=1)
    N: int = Field(500, ge=2)
    K_pop: int = Field(3, ge=1)
    n_causal: int = Field(10, ge=0)
    beta_sd: float = Field(0.5, ge=0)

    # modelo
    K: int = Field(3, ge=1)
    snp_hidden: tuple[int, int] = (64, 64)
    trait_hidden: tuple[int, int] = (32, 256)
    trait_kind: TraitKind = TraitKind.REAL_IMPLICIT
    num_levels: int = Field(2, ge=2)
    snp_model: SnpModelKind = SnpModelKind.LOGISTIC_FA
    trait_model: TraitModelKind = TraitModelKind.NEURAL
    group_lasso_scale: float = Field(1.0, gt=0)
    trait_batch_norm: bool = False

    # etapa 1
    snp_batch_size: int = Field(512, ge=1)
    individual_batch_size: int | None = Field(None, ge=1)
    epochs: int = Field(2, ge=1)
    step_size: float = Field(0.005, ge=0)
    mc_samples: int = Field(1, ge=1)

    # etapa 2
    stage2_epochs: int = Field(100, ge=0)
    stage2_batch_size: int | None = Field(None, ge=1)
    ratio_hidden: tuple[int, int] = (64, 64)
    ratio_step_size: float = Field(0.005, ge=0)
    ratio_steps: int = Field(1, ge=0)
    generator_steps: int = Field(1, ge=0)
    fake_weight: float = Field(1.0, ge=0)

    # asociacion y estudio
    threshold: float = Field(assoc.DEFAULT_THRESHOLD, gt=0, le=1)
    methods: list[str] = ["icm", "pca", "uncorrected"]
    K_pc: int = Field(3, ge=0)
    top_k: int = Field(10, ge=1)
    configurations: list[str] = ["psd:0.1", "spatial:0.1"]
    replicates: int = Field(10, ge=0)
    study_epochs: int = Field(100, ge=1)
    study_step_size: float = Field(0.05, gt=0)

    gradcheck_instances: int = Field(20, ge=1)

    seed: int | None = Field(None, ge=0, lt=2**64)
    threads: int = Field(default_factory=lambda: settings.threads, ge=1)
    output_dir: str = Field(default_factory=lambda: settings.output_dir)

    _pairs = field_validator("snp_hidden", "trait_hidden", "ratio_hidden", mode="before")(parse_pair)
    _lists = field_validator("methods", "configurations", mode="before")(_split)

    @field_validator("methods")
    @classmethod
    def _known_methods(cls, v: list[str]) -> list[str]:
        unknown = [m for m in v if m not in METHODS]
        if unknown:
            raise ValueError(f"Metodos desconocidos: {unknown} (opciones: {', '.join(METHODS)})")
        return v

    @property
    def out(self) -> Path:
        return Path(self.output_dir)

    def require_seed(self, command: str) -> int:
        if self.seed is None:
            raise ConfigError(f"'{command}' requiere --seed o 'seed' en el archivo de configuracion")
        return self.seed

    def sim_config(self) -> SimConfig:
        return SimConfig(
            family=self.family, a=self.a, M=self.M, N=self.N,
            K_pop=self.K_pop, n_causal=self.n_causal, beta_sd=self.beta_sd,
        )

    def icm_config(self) -> IcmConfig:
        return IcmConfig(
            K=self.K, snp_hidden=self.snp_hidden, trait_hidden=self.trait_hidden,
            trait_kind=self.trait_kind, num_levels=self.num_levels, snp_model=self.snp_model,
            trait_model=self.trait_model, group_lasso_scale=self.group_lasso_scale,
            trait_batch_norm=self.trait_batch_norm,
        )

    def stage1_config(self, epochs: int | None = None, step_size: float | None = None) -> Stage1Config:
        return Stage1Config(
            snp_batch_size=self.snp_batch_size, individual_batch_size=self.individual_batch_size,
            epochs=epochs or self.epochs, step_size=step_size or self.step_size, mc_samples=self.mc_samples,
            seed=self.seed or 0, threads=self.threads,
        )

    def stage2_config(self) -> Stage2Config:
        return Stage2Config(
            individual_batch_size=self.stage2_batch_size, epochs=self.stage2_epochs,
            step_size=self.step_size, mc_samples=self.mc_samples, seed=self.seed or 0,
            ratio_hidden=self.ratio_hidden, ratio_step_size=self.ratio_step_size,
            ratio_steps=self.ratio_steps, generator_steps=self.generator_steps,
            fake_weight=self.fake_weight,
        )

    def study_config(self) -> StudyConfig:
        return StudyConfig(
            configurations=self.configurations, replicates=self.replicates, methods=self.methods,
            M=self.M, N=self.N, n_causal=self.n_causal, K=self.K, K_pc=self.K_pc,
            threshold=self.threshold, seed=self.seed or 0, threads=self.threads,
            stage1=self.stage1_config(self.study_epochs, self.study_step_size), stage2=self.stage2_config(),
            icm=self.icm_config(),
        )


def read_config_file(path: str | Path) -> dict[str, str | None]:
    """
    Lee `clave = valor` por linea; `#` inicia un comentario y `none` (o vacio)
    deja el campo en None.
    """
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise StorageError(f"No se puede leer la configuracion {path}: {e}") from e
    values: dict[str, str | None] = {}
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"{path}:{number}: se esperaba 'clave = valor'")
        value = value.strip()
        values[key.strip()] = None if value.lower() in ("", "none") else value
    return values


def load_run_config(args: argparse.Namespace) -> RunConfig:
    """Valores por defecto < archivo de configuracion < flags."""
    values = read_config_file(args.config) if args.config else {}
    flags = {
        "seed": args.seed,
        "threads": args.threads,
        "output_dir": args.out,
        "methods": args.method,
        "threshold": args.threshold,
    }
    values.update({k: v for k, v in flags.items() if v is not None})
    return RunConfig(**values)


# simulate


def cmd_simulate(run: RunConfig) -> int:
    seed = run.require_seed("simulate")
    data = simulate_dataset(run.sim_config(), seed, threads=run.threads)
    s = data.structure
    truth = TruthBlock(
        beta=data.beta, lambda_=data.lambda_, sigma=data.sigma, causal=data.causal_set,
        Gamma=s.Gamma, S=s.S, labels=s.labels, family=s.family.value, a=s.sparsity_a, seed=seed,
    )
    path = run.out / DATASET_FILE
    save_dataset(path, DatasetFile(data.genotypes, data.traits, truth))
    summary = dataset_summary(data.genotypes, data.traits, s.S, s.family.value, s.sparsity_a)
    write_text(path.with_suffix(".summary.txt"), summary)
    print(summary, end="")
    return 0


# fit


def _check_resumed(state: VariationalState, run: RunConfig, N: int, M: int):
    if "K" in run.model_fields_set and state.config.K != run.K:
        raise ConfigError(f"El checkpoint tiene K={state.config.K} y la configuracion K={run.K}")
    if (state.N, state.M) != (N, M):
        raise ConfigError(f"Checkpoint para {state.N} x {state.M}, dataset {N} x {M}")


def _reset_stage2(state: VariationalState):
    """Descarta la etapa 2 cuando la etapa 1 avanzo despues de ella."""
    state.theta, state.ratio, state.ratio_spec = None, None, None
    state.epochs_done["stage2"] = 0
    for block in ("theta", "ratio"):
        state.optim.pop(block, None)
    state.trace = [row for row in state.trace if row[1] == "stage1_elbo"]


def cmd_fit(run: RunConfig, dataset: Path, stage2: str = "auto", resume: bool = False) -> int:
    seed = run.require_seed("fit")
    data = load_dataset(dataset)
    if stage2 == "yes" and data.traits is None:
        raise ConfigError(f"Se pidio la etapa 2 pero {dataset.name} no tiene bloque de rasgos")
    checkpoint = run.out / CHECKPOINT_FILE
    seeds = {"seed": seed}

    state = None
    if resume and checkpoint.exists():
        state, _ = load_checkpoint(checkpoint)
        _check_resumed(state, run, data.N, data.M)
        logger.info("Reanudando desde {} (etapa 1: {} epocas)", checkpoint.name, state.epochs_done["stage1"])
    elif resume:
        logger.warning("No hay checkpoint en {}, se empieza desde cero", checkpoint)

    icm_config = state.config if state is not None else run.icm_config()
    stage1 = run.stage1_config()
    if state is not None and state.epochs_done["stage1"] < stage1.epochs and state.epochs_done["stage2"]:
        _reset_stage2(state)

    def save(s: VariationalState, *_):
        save_checkpoint(checkpoint, s, seeds)

    state = stage1_fit(data.genotypes, icm_config, stage1, state=state, on_epoch=save)
    save(state)

    if data.traits is not None and stage2 != "no":
        stage2_fit(data.genotypes, data.traits, state, run.stage2_config(), on_epoch=save)
        save(state)

    write_metrics(run.out / METRICS_FILE, state.trace)
    print(f"Etapa 1: {state.epochs_done['stage1']} epocas, etapa 2: {state.epochs_done['stage2']} epocas")
    return 0


# assoc


def _run_method(method: str, run: RunConfig, y: np.ndarray, X: np.ndarray, state: VariationalState) -> assoc.AssociationResult:
    match method:
        case "icm":
            return assoc.test_corrected(y, X, state.z_mean, run.threshold, run.threads)
        case "pca":
            rng = RngStream(run.seed or 0).spawn(7)
            return assoc.test_pca_baseline(y, X, run.K_pc, run.threshold, rng, run.threads)
        case "uncorrected":
            return assoc.test_uncorrected(y, X, run.threshold, run.threads)
        case "nn":
            if state.theta is None:
                raise ConfigError("El metodo nn requiere un checkpoint con la etapa 2 ajustada")
            return assoc.test_nn_ranking(state.theta, run.top_k)
    raise ConfigError(f"Metodo desconocido: {method}")


def cmd_assoc(run: RunConfig, dataset: Path, checkpoint: Path) -> int:
    data = load_dataset(dataset)
    if data.traits is None:
        raise ConfigError(f"{dataset.name} no tiene bloque de rasgos")
    state, _ = load_checkpoint(checkpoint)
    _check_resumed(state, run, data.N, data.M)
    X = np.asarray(data.genotypes)

    for method in run.methods:
        result = _run_method(method, run, data.traits, X, state)
        lam = assoc.genomic_control(result)[0] if method != "nn" else float("nan")
        footer: dict[str, object] = {
            "method": method,
            "threshold": result.threshold,
            "discoveries": int(result.significant_set.size),
            "lambda_gc": lam,
        }
        prec = None
        if data.truth is not None:
            prec = assoc.precision(result, data.truth.causal)
            footer["precision"] = prec
        rows = zip(range(data.M), result.statistic, result.p_value, result.significant)
        write_tsv(run.out / f"assoc_{method}.tsv", ["snp", "statistic", "p_value", "significant"], rows, footer)
        print(assoc_summary(method, data.M, footer["discoveries"], result.threshold, lam, prec))
    return 0


# study


def cmd_study(run: RunConfig) -> int:
    if run.replicates < 1:
        raise ConfigError("El estudio necesita al menos una replica")
    config = run.study_config()
    result = run_replicated_study(config)

    header = ["configuration", "method", "mean_precision", "stderr", "defined", "undefined", "failed", "reference"]
    rows = [
        (r.configuration, r.method, r.mean, r.stderr, r.defined, r.undefined, r.failed, r.reference)
        for r in result.summary
    ]
    write_tsv(run.out / "study_summary.tsv", header, rows, {"replicates": config.replicates, "seed": config.seed})

    per_replicate = [
        (r.configuration, r.replicate, r.seed, m, r.precision.get(m, float("nan")),
         r.discoveries.get(m, 0), r.lambda_gc.get(m, float("nan")), r.error or "")
        for r in result.replicates
        for m in (config.methods if r.error is None else ["-"])
    ]
    write_tsv(
        run.out / "study_replicates.tsv",
        ["configuration", "replicate", "seed", "method", "precision", "discoveries", "lambda_gc", "error"],
        per_replicate,
    )

    methods = ["icm", "pca", "lmm", "gcat"]
    write_tsv(
        run.out / "reference.tsv",
        ["configuration"] + methods,
        [[label] + [ref[m] / 100.0 for m in methods] for label, ref in REFERENCE_PRECISION.items()],
    )

    print(table_to_text(
        ["configuracion", "metodo", "precision", "error std", "referencia"],
        [
            {
                "configuracion": r.configuration,
                "metodo": r.method,
                "precision": r.mean,
                "error std": "" if r.stderr is None else format_float(r.stderr),
                "referencia": "" if r.reference is None else format_float(r.reference),
            }
            for r in result.summary
        ],
    ))
    if result.failures:
        for r in result.failures:
            logger.error("{} replica {}: {}", r.configuration, r.replicate, r.error)
        return max(r.exit_code for r in result.failures)
    return 0


# gradcheck


def cmd_gradcheck(run: RunConfig) -> int:
    reports = run_suite(run.gradcheck_instances, seed=run.seed or 0)
    write_tsv(
        run.out / "gradcheck.tsv",
        ["operation", "instances", "max_relative_error", "passed"],
        [(r.operation, r.instances, r.max_error, r.passed) for r in reports],
    )
    print(table_to_text(
        ["operacion", "instancias", "error maximo", "ok"],
        [
            {"operacion": r.operation, "instancias": r.instances, "error maximo": f"{r.max_error:.2e}", "ok": "si" if r.passed else "NO"}
            for r in reports
        ],
    ))
    return 0 if all(r.passed for r in reports) else 2


# parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, default=None, help="archivo clave = valor")
    common.add_argument("--seed", type=int, default=None, help="semilla (obligatoria en simulate y fit)")
    common.add_argument("--threads", type=int, default=None, help="hilos de trabajo")
    common.add_argument("--out", type=str, default=None, help="directorio de salida")
    common.add_argument("--method", type=str, default=None, help="lista de metodos separada por comas")
    common.add_argument("--threshold", type=float, default=None, help="umbral de p-valor")

    parser = argparse.ArgumentParser(prog="icm", description="Modelos causales implicitos para GWAS")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("simulate", parents=[common], help="simula genotipos y rasgo con verdad conocida")

    fit = sub.add_parser("fit", parents=[common], help="ajusta las etapas 1 y 2")
    fit.add_argument("--dataset", type=Path, default=None, help=f"por defecto <out>/{DATASET_FILE}")
    fit.add_argument("--stage2", choices=("auto", "yes", "no"), default="auto",
                     help="auto: solo si el dataset tiene rasgos")
    fit.add_argument("--resume", action="store_true", help="continua desde el checkpoint de <out>")

    assoc_p = sub.add_parser("assoc", parents=[common], help="tests de asociacion por SNP")
    assoc_p.add_argument("--dataset", type=Path, default=None, help=f"por defecto <out>/{DATASET_FILE}")
    assoc_p.add_argument("--checkpoint", type=Path, default=None, help=f"por defecto <out>/{CHECKPOINT_FILE}")

    sub.add_parser("study", parents=[common], help="estudio replicado de precision")
    sub.add_parser("gradcheck", parents=[common], help="verifica los gradientes analiticos")
    return parser


def dispatch(args: argparse.Namespace) -> int:
    run = load_run_config(args)
    match args.command:
        case "simulate":
            return cmd_simulate(run)
        case "fit":
            return cmd_fit(run, args.dataset or run.out / DATASET_FILE, args.stage2, args.resume)
        case "assoc":
            return cmd_assoc(run, args.dataset or run.out / DATASET_FILE, args.checkpoint or run.out / CHECKPOINT_FILE)
        case "study":
            return cmd_study(run)
        case "gradcheck":
            return cmd_gradcheck(run)
    raise ConfigError(f"Comando desconocido: {args.command}")


def main(argv: list[str] | None = None) -> int:
    """Ejecuta un comando y devuelve el codigo de salida."""
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as e:
        # argparse sale con 2 ante un uso invalido; el CLI reserva 2 para fallas numericas
        return 0 if e.code in (0, None) else 1
    try:
        return dispatch(args)
    except IcmError as e:
        logger.error("{}: {}", type(e).__name__, e)
        return e.exit_code
    except ValidationError as e:
        logger.error("Configuracion invalida:\n{}", e)
        return 1
    except OSError as e:
        logger.error("Error de E/S: {}", e)
        return 3
