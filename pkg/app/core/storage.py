"""
Formatos de archivo: dataset binario ICMG1, checkpoints versionados y tablas
TSV de resultados. Toda escritura es atomica (temporal + rename).
"""

import json
import os
import struct
import tempfile
import zipfile
from collections.abc import Iterator
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from loguru import logger

from app.core.errors import StorageError
from app.core.icm import IcmConfig, SnpModelParams, TraitKind, TraitModelKind, TraitModelParams, snp_spec, trait_spec
from app.core.lfvi.ratio import ratio_spec
from app.core.lfvi.state import VariationalState
from app.core.numerics.mlp import MlpParams
from app.core.numerics.optim import AdamState

MAGIC = b"ICMG1"
_HEADER = struct.Struct("<QQI")
HEADER_SIZE = len(MAGIC) + _HEADER.size
FLAG_TRAITS = 1
FLAG_TRUTH = 2
_TRUTH_HEADER = struct.Struct("<16sdQQQ")  # familia, a, seed, n_causal, K_pop
CHECKPOINT_VERSION = 1
_ZIP_EPOCH = (1980, 1, 1, 0, 0, 0)
_GENOTYPE_SCAN_ROWS = 4096


@contextmanager
def atomic_path(path: str | Path) -> Iterator[Path]:
    """Entrega un temporal en el mismo directorio y lo renombra a `path` al salir sin error."""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
        os.close(fd)
    except OSError as e:
        raise StorageError(f"No se puede escribir en {path.parent}: {e}") from e
    tmp = Path(tmp)
    try:
        yield tmp
        os.replace(tmp, path)
    except OSError as e:
        raise StorageError(f"Error escribiendo {path}: {e}") from e
    finally:
        if tmp.exists():
            tmp.unlink()


def write_text(path: str | Path, text: str):
    with atomic_path(path) as tmp:
        tmp.write_text(text, encoding="utf-8")


# Dataset


@dataclass
class TruthBlock:
    beta: np.ndarray
    lambda_: np.ndarray
    sigma: np.ndarray
    causal: np.ndarray
    Gamma: np.ndarray
    S: np.ndarray
    labels: np.ndarray
    family: str
    a: float
    seed: int


@dataclass
class DatasetFile:
    genotypes: np.ndarray  # N x M uint8 (memmap al leer)
    traits: np.ndarray | None = None
    truth: TruthBlock | None = None

    @property
    def N(self) -> int:
        return self.genotypes.shape[0]

    @property
    def M(self) -> int:
        return self.genotypes.shape[1]


def _f64(a) -> bytes:
    return np.ascontiguousarray(a, dtype="<f8").tobytes()


def _i64(a) -> bytes:
    return np.ascontiguousarray(a, dtype="<i8").tobytes()


def truth_size(M: int, N: int, n_causal: int, K_pop: int) -> int:
    return _TRUTH_HEADER.size + 8 * (M + 2 * N + n_causal + M * K_pop + K_pop * N + N)


def save_dataset(path: str | Path, dataset: DatasetFile):
    X = dataset.genotypes
    N, M = X.shape
    flags = (FLAG_TRAITS if dataset.traits is not None else 0) | (FLAG_TRUTH if dataset.truth is not None else 0)
    with atomic_path(path) as tmp, open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(_HEADER.pack(M, N, flags))
        for start in range(0, N, _GENOTYPE_SCAN_ROWS):
            f.write(np.ascontiguousarray(X[start:start + _GENOTYPE_SCAN_ROWS], dtype=np.uint8).tobytes())
        if dataset.traits is not None:
            f.write(_f64(dataset.traits))
        if dataset.truth is not None:
            t = dataset.truth
            f.write(_TRUTH_HEADER.pack(t.family.encode("ascii"), t.a, t.seed, len(t.causal), t.S.shape[0]))
            for block in (t.beta, t.lambda_, t.sigma):
                f.write(_f64(block))
            f.write(_i64(t.causal))
            f.write(_f64(t.Gamma))
            f.write(_f64(t.S))
            f.write(_i64(t.labels))
    logger.info("Dataset guardado: {} ({} x {})", Path(path).name, N, M)


def _read(f, dtype: str, count: int) -> np.ndarray:
    data = f.read(8 * count)
    if len(data) != 8 * count:
        raise StorageError("Dataset truncado")
    return np.frombuffer(data, dtype=dtype, count=count).astype(dtype[1:])


def load_dataset(path: str | Path, validate: bool = True) -> DatasetFile:
    """Valida cabecera y largos antes de mapear los genotipos en memoria."""
    path = Path(path)
    try:
        size = path.stat().st_size
        with open(path, "rb") as f:
            if f.read(len(MAGIC)) != MAGIC:
                raise StorageError(f"{path.name} no es un dataset ICMG1")
            raw = f.read(_HEADER.size)
            if len(raw) != _HEADER.size:
                raise StorageError(f"Cabecera incompleta en {path.name}")
            M, N, flags = _HEADER.unpack(raw)
            f.seek(HEADER_SIZE + N * M)
            traits = _read(f, "<f8", N) if flags & FLAG_TRAITS else None
            truth = None
            if flags & FLAG_TRUTH:
                raw = f.read(_TRUTH_HEADER.size)
                if len(raw) != _TRUTH_HEADER.size:
                    raise StorageError("Bloque de verdad truncado")
                family, a, seed, n_causal, K_pop = _TRUTH_HEADER.unpack(raw)
                expected = HEADER_SIZE + N * M + (8 * N if traits is not None else 0) + truth_size(M, N, n_causal, K_pop)
                if size != expected:
                    raise StorageError(f"Tamano {size} distinto del esperado {expected}")
                truth = TruthBlock(
                    beta=_read(f, "<f8", M),
                    lambda_=_read(f, "<f8", N),
                    sigma=_read(f, "<f8", N),
                    causal=_read(f, "<i8", n_causal),
                    Gamma=_read(f, "<f8", M * K_pop).reshape(M, K_pop),
                    S=_read(f, "<f8", K_pop * N).reshape(K_pop, N),
                    labels=_read(f, "<i8", N),
                    family=family.rstrip(b"\0").decode("ascii"),
                    a=a,
                    seed=seed,
                )
            elif size != HEADER_SIZE + N * M + (8 * N if traits is not None else 0):
                raise StorageError(f"Tamano de {path.name} no coincide con la cabecera")
    except OSError as e:
        raise StorageError(f"No se puede leer {path}: {e}") from e

    X = np.memmap(path, dtype=np.uint8, mode="r", offset=HEADER_SIZE, shape=(N, M))
    if validate:
        for start in range(0, N, _GENOTYPE_SCAN_ROWS):
            if X[start:start + _GENOTYPE_SCAN_ROWS].max(initial=0) > 2:
                raise StorageError(f"Genotipos fuera de {{0,1,2}} en {path.name}")
    logger.debug("Dataset leido: {} ({} x {}, flags={})", path.name, N, M, flags)
    return DatasetFile(X, traits, truth)


# Checkpoints


def _put_params(arrays: dict, prefix: str, params: MlpParams | None):
    if params is None:
        return
    for name, arr in params.weights.items():
        arrays[f"{prefix}.w.{name}"] = arr
    for name, arr in params.buffers.items():
        arrays[f"{prefix}.b.{name}"] = arr


def _get_params(arrays: dict, prefix: str) -> MlpParams | None:
    weights = {k.split(".", 2)[2]: v for k, v in arrays.items() if k.startswith(f"{prefix}.w.")}
    buffers = {k.split(".", 2)[2]: v for k, v in arrays.items() if k.startswith(f"{prefix}.b.")}
    if not weights:
        return None
    return MlpParams(weights, buffers)


def _write_npz(path: Path, arrays: dict[str, np.ndarray]):
    """npz con fecha fija en cada entrada: mismo estado, mismos bytes."""
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name in sorted(arrays):
            info = zipfile.ZipInfo(f"{name}.npy", date_time=_ZIP_EPOCH)
            with zf.open(info, "w", force_zip64=True) as fh:
                np.lib.format.write_array(fh, np.asarray(arrays[name]), allow_pickle=False)


def save_checkpoint(path: str | Path, state: VariationalState, seeds: dict[str, int] | None = None):
    arrays: dict[str, np.ndarray] = {
        "mu_z": state.mu_z,
        "log_sigma_z": state.log_sigma_z,
        "mu_w": state.mu_w,
        "log_sigma_w": state.log_sigma_w,
    }
    _put_params(arrays, "phi", state.phi.phi)
    if state.phi.offset is not None:
        arrays["snp_offset"] = state.phi.offset
    if state.theta is not None:
        _put_params(arrays, "theta", MlpParams(state.theta.weights, state.theta.buffers))
    _put_params(arrays, "ratio", state.ratio)

    optim_meta = {}
    for block, adam in state.optim.items():
        optim_meta[block] = {
            "step": adam.step, "step_size": adam.step_size,
            "beta1": adam.beta1, "beta2": adam.beta2, "eps": adam.eps,
        }
        for kind, store in (("m", adam.m), ("v", adam.v), ("rows", adam.row_steps)):
            for name, arr in store.items():
                arrays[f"optim.{block}.{kind}.{name}"] = arr

    meta = {
        "version": CHECKPOINT_VERSION,
        "config": state.config.model_dump(mode="json"),
        "dims": {"N": state.N, "M": state.M},
        "epochs_done": state.epochs_done,
        "trace": [list(row) for row in state.trace],
        "optim": optim_meta,
        "ratio_hidden": list(state.ratio_spec.hidden_dims) if state.ratio_spec else None,
        "rng": {"algorithm": "PCG64", "seeds": seeds or {}},
    }
    arrays["meta"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8)
    with atomic_path(path) as tmp:
        _write_npz(tmp, arrays)
    logger.info("Checkpoint guardado: {} (etapa 1: {} epocas, etapa 2: {})",
                Path(path).name, state.epochs_done["stage1"], state.epochs_done["stage2"])


def load_checkpoint(path: str | Path) -> tuple[VariationalState, dict]:
    """Devuelve el estado y la metadata; falla si la version es mas nueva que la soportada."""
    path = Path(path)
    try:
        with np.load(path, allow_pickle=False) as npz:
            arrays = {k: npz[k] for k in npz.files}
    except (OSError, ValueError) as e:
        raise StorageError(f"No se puede leer el checkpoint {path}: {e}") from e
    if "meta" not in arrays:
        raise StorageError(f"{path.name} no es un checkpoint")
    meta = json.loads(arrays.pop("meta").tobytes().decode("utf-8"))
    if meta.get("version", 0) > CHECKPOINT_VERSION:
        raise StorageError(f"Checkpoint version {meta['version']} mas nueva que la soportada ({CHECKPOINT_VERSION})")

    config = IcmConfig(**meta["config"])
    M = meta["dims"]["M"]
    phi = _get_params(arrays, "phi")
    state = VariationalState(
        config=config,
        mu_z=arrays["mu_z"],
        log_sigma_z=arrays["log_sigma_z"],
        mu_w=arrays["mu_w"],
        log_sigma_w=arrays["log_sigma_w"],
        phi=SnpModelParams(
            config.snp_model, config.K, phi, snp_spec(config) if phi is not None else None,
            offset=arrays.get("snp_offset"),
        ),
        epochs_done={k: int(v) for k, v in meta["epochs_done"].items()},
        trace=[(int(e), str(b), float(v)) for e, b, v in meta["trace"]],
    )

    theta = _get_params(arrays, "theta")
    if theta is not None:
        state.theta = TraitModelParams(
            model=config.trait_model,
            trait_kind=TraitKind(config.trait_kind),
            num_levels=config.num_levels,
            M=M,
            K=config.K,
            weights=theta.weights,
            buffers=theta.buffers,
            spec=trait_spec(config, M) if config.trait_model == TraitModelKind.NEURAL else None,
        )
    state.ratio = _get_params(arrays, "ratio")
    if state.ratio is not None:
        hidden1 = state.ratio.weights["W1"].shape[0] - 1
        state.ratio_spec = ratio_spec(hidden1, tuple(meta["ratio_hidden"]))

    for block, info in meta["optim"].items():
        adam = AdamState(step_size=info["step_size"], beta1=info["beta1"], beta2=info["beta2"], eps=info["eps"], step=info["step"])
        for key, arr in arrays.items():
            parts = key.split(".", 3)
            if parts[0] == "optim" and parts[1] == block:
                {"m": adam.m, "v": adam.v, "rows": adam.row_steps}[parts[2]][parts[3]] = arr
        state.optim[block] = adam

    logger.debug("Checkpoint leido: {} (version {})", path.name, meta["version"])
    return state, meta


# Tablas TSV


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return "NA" if np.isnan(v) else f"{float(v):.17g}"
    return "" if v is None else str(v)


def tsv_text(header: list[str], rows, footer: dict[str, object] | None = None) -> str:
    lines = ["\t".join(header)]
    lines += ["\t".join(_fmt(v) for v in row) for row in rows]
    for key, value in (footer or {}).items():
        lines.append(f"# {key}\t{_fmt(value)}")
    return "\n".join(lines) + "\n"


def write_tsv(path: str | Path, header: list[str], rows, footer: dict[str, object] | None = None):
    write_text(path, tsv_text(header, rows, footer))


def read_tsv(path: str | Path) -> tuple[list[str], list[list[str]], dict[str, str]]:
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as e:
        raise StorageError(f"No se puede leer {path}: {e}") from e
    if not lines:
        raise StorageError(f"{path} esta vacio: falta la cabecera")
    header = lines[0].split("\t")
    rows, footer = [], {}
    for line in lines[1:]:
        if line.startswith("# "):
            key, _, value = line[2:].partition("\t")
            footer[key] = value
        elif line:
            rows.append(line.split("\t"))
    return header, rows, footer


def write_metrics(path: str | Path, trace: list[tuple[int, str, float]]):
    write_tsv(path, ["epoch", "block", "value"], trace)
