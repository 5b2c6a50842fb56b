"""
Tests de asociacion por SNP, puntajes del modelo, precision y control genomico.

Todos los tests son OLS de y sobre [1, x_m, covariables] con test t bilateral
sobre el coeficiente de x_m. Se calculan por Frisch-Waugh-Lovell: y y cada
columna de X se residualizan una vez contra [1, covariables].
"""

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from loguru import logger
from scipy import stats

from app.core.errors import DimensionError, DomainError
from app.core.icm import TraitModelParams, snp_weight_groups
from app.core.numerics.rng import RngStream
from app.core.numerics.stats import checked_qr, t_pvalues, top_principal_components

DEFAULT_THRESHOLD = 0.0025
GENOME_WIDE_THRESHOLD = 7.2e-8
CHI2_MEDIAN = 0.4549
GC_MIN_PVALUES = 100
SNP_COLUMNS_PER_TASK = 4096
_DEGENERATE_RTOL = 1e-10


@dataclass
class AssociationResult:
    statistic: np.ndarray
    p_value: np.ndarray
    method: str
    threshold: float = DEFAULT_THRESHOLD
    degenerate: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))
    lambda_gc: float = math.nan

    @property
    def significant(self) -> np.ndarray:
        return self.p_value <= self.threshold

    @property
    def significant_set(self) -> np.ndarray:
        return np.flatnonzero(self.significant)

    def at_threshold(self, threshold: float) -> "AssociationResult":
        return replace(self, threshold=threshold)


def _residualize(Q: np.ndarray, A: np.ndarray) -> np.ndarray:
    return A - Q @ (Q.T @ A)


def per_snp_ttest(
    y: np.ndarray,
    X: np.ndarray,
    covariates: np.ndarray | None,
    method: str,
    threshold: float = DEFAULT_THRESHOLD,
    threads: int = 1,
) -> AssociationResult:
    """
    Test t del coeficiente de cada SNP en y ~ 1 + x_m + covariables.
    Columnas constantes (o colineales con las covariables) dan p = 1 y quedan
    marcadas en `degenerate`.
    """
    y = np.asarray(y, dtype=np.float64)
    N, M = X.shape
    if y.shape != (N,):
        raise DimensionError(f"y de largo {y.shape} para {N} individuos")
    C = np.ones((N, 1))
    if covariates is not None and covariates.size:
        covariates = np.asarray(covariates, dtype=np.float64).reshape(N, -1)
        C = np.concatenate([C, covariates], axis=1)
    df = N - C.shape[1] - 1
    if df < 1:
        raise DimensionError(f"Sin grados de libertad: N={N}, covariables={C.shape[1]}")

    Q, _ = checked_qr(C)
    y_r = _residualize(Q, y[:, None])[:, 0]
    yy = float(y_r @ y_r)
    statistic = np.zeros(M)
    p_value = np.ones(M)
    degenerate = np.zeros(M, dtype=bool)

    if yy <= _DEGENERATE_RTOL * max(float(y @ y), 1.0):
        logger.warning("Rasgo sin variacion tras ajustar covariables ({}): todos los p-valores = 1", method)
        return AssociationResult(statistic, p_value, method, threshold, degenerate)

    def run(start: int):
        cols = slice(start, min(start + SNP_COLUMNS_PER_TASK, M))
        block = np.asarray(X[:, cols], dtype=np.float64)
        x_r = _residualize(Q, block)
        xx = (x_r * x_r).sum(axis=0)
        bad = xx <= _DEGENERATE_RTOL * np.maximum((block * block).sum(axis=0), 1.0)
        safe = np.where(bad, 1.0, xx)
        coef = (x_r.T @ y_r) / safe
        rss = np.maximum(yy - coef * coef * safe, 0.0)
        se = np.sqrt(rss / df / safe)
        t, p = t_pvalues(coef, se, df)
        statistic[cols] = np.where(bad, 0.0, t)
        p_value[cols] = np.where(bad, 1.0, p)
        degenerate[cols] = bad

    starts = range(0, M, SNP_COLUMNS_PER_TASK)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(run, starts))
    else:
        for start in starts:
            run(start)

    if degenerate.any():
        logger.warning("{} SNPs degenerados (columna constante) en {}", int(degenerate.sum()), method)
    return AssociationResult(statistic, p_value, method, threshold, degenerate)


def test_corrected(
    y: np.ndarray, X: np.ndarray, z_hat: np.ndarray, threshold: float = DEFAULT_THRESHOLD, threads: int = 1
) -> AssociationResult:
    """Test por SNP condicionado a E_q[z_n] de la etapa 1."""
    return per_snp_ttest(y, X, z_hat, "icm", threshold, threads)


def test_pca_baseline(
    y: np.ndarray,
    X: np.ndarray,
    K_pc: int = 3,
    threshold: float = DEFAULT_THRESHOLD,
    rng: RngStream | None = None,
    threads: int = 1,
) -> AssociationResult:
    """Test por SNP con los scores de las K_pc componentes principales de X como covariables."""
    N, M = X.shape
    if not 0 <= K_pc <= min(N, M):
        raise DomainError(f"K_pc={K_pc} fuera de rango para X {N}x{M}")
    _, scores = top_principal_components(X, K_pc, rng)
    return per_snp_ttest(y, X, scores, "pca", threshold, threads)


def test_uncorrected(
    y: np.ndarray, X: np.ndarray, threshold: float = DEFAULT_THRESHOLD, threads: int = 1
) -> AssociationResult:
    return per_snp_ttest(y, X, None, "uncorrected", threshold, threads)


def nn_snp_scores(theta: TraitModelParams) -> np.ndarray:
    """Norma del grupo de pesos de primera capa de cada SNP (|coeficiente| en el modelo lineal)."""
    return np.sqrt((snp_weight_groups(theta) ** 2).sum(axis=1))


def test_nn_ranking(theta: TraitModelParams, top_k: int = 10) -> AssociationResult:
    """
    Ranking por nn_snp_scores. No es un test calibrado: p_value es el rango
    empirico (rango / M) y el umbral selecciona los top_k SNPs.
    """
    scores = nn_snp_scores(theta)
    M = scores.shape[0]
    order = np.argsort(-scores, kind="stable")
    rank = np.empty(M)
    rank[order] = np.arange(1, M + 1)
    return AssociationResult(scores, rank / M, "nn", threshold=min(top_k, M) / M, degenerate=np.zeros(M, dtype=bool))


def precision(result: AssociationResult, causal_set) -> float:
    """Verdaderos positivos / positivos declarados; NaN si no hay descubrimientos."""
    found = result.significant_set
    if found.size == 0:
        return math.nan
    hits = np.isin(found, np.asarray(list(causal_set), dtype=np.int64))
    return float(hits.sum() / found.size)


def expected_false_positives(num_null: int, threshold: float) -> float:
    return num_null * threshold


def genomic_control(result: AssociationResult) -> tuple[float, AssociationResult]:
    """
    lambda_GC = mediana de los cuantiles chi2(1) de los p-valores / 0.4549.
    Con lambda > 1 divide los estadisticos chi2 por lambda; nunca deflaciona.
    """
    p = np.clip(result.p_value, 0.0, 1.0)
    if p.size < GC_MIN_PVALUES:
        logger.warning("Control genomico con {} p-valores (< {}): lambda indefinido", p.size, GC_MIN_PVALUES)
        return math.nan, replace(result, lambda_gc=math.nan)

    chi2 = stats.chi2.isf(p, 1)
    lam = float(np.median(chi2) / CHI2_MEDIAN)
    if lam <= 1.0:
        return lam, replace(result, lambda_gc=lam)

    corrected = chi2 / lam
    return lam, replace(
        result,
        statistic=np.sign(result.statistic) * np.sqrt(corrected),
        p_value=stats.chi2.sf(corrected, 1),
        lambda_gc=lam,
    )


# pytest no debe recolectarlas al importarlas en los tests
for _fn in (test_corrected, test_pca_baseline, test_uncorrected, test_nn_ranking):
    _fn.__test__ = False
