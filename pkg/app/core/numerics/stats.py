"""
Estadistica clasica: componentes principales, K-means y regresion OLS con test t.
"""

from dataclasses import dataclass

import numpy as np
from scipy import linalg, stats
from sklearn.cluster import KMeans

from app.core.errors import DimensionError, DomainError, SingularityError
from app.core.numerics.rng import RngStream

EXACT_PCA_LIMIT = 512
PCA_OVERSAMPLES = 8
PCA_POWER_ITERS = 4
KMEANS_RESTARTS = 10
KMEANS_MAX_ITER = 300
_BLOCK = 8192


def _column_means(X: np.ndarray) -> np.ndarray:
    means = np.zeros(X.shape[1])
    for start in range(0, X.shape[1], _BLOCK):
        block = X[:, start:start + _BLOCK].astype(np.float64)
        means[start:start + _BLOCK] = block.mean(axis=0)
    return means


def _centered_matmul(X: np.ndarray, means: np.ndarray, Q: np.ndarray) -> np.ndarray:
    """(X - 1 means^T) @ Q por bloques de columnas, sin materializar X centrada."""
    out = np.zeros((X.shape[0], Q.shape[1]))
    for start in range(0, X.shape[1], _BLOCK):
        block = X[:, start:start + _BLOCK].astype(np.float64) - means[start:start + _BLOCK]
        out += block @ Q[start:start + _BLOCK]
    return out


def _centered_rmatmul(X: np.ndarray, means: np.ndarray, P: np.ndarray) -> np.ndarray:
    """(X - 1 means^T)^T @ P por bloques de columnas."""
    out = np.zeros((X.shape[1], P.shape[1]))
    for start in range(0, X.shape[1], _BLOCK):
        block = X[:, start:start + _BLOCK].astype(np.float64) - means[start:start + _BLOCK]
        out[start:start + _BLOCK] = block.T @ P
    return out


def _fix_signs(components: np.ndarray, scores: np.ndarray):
    for k in range(components.shape[0]):
        if components[k, np.argmax(np.abs(components[k]))] < 0:
            components[k] *= -1
            scores[:, k] *= -1


def top_principal_components(
    X: np.ndarray, K: int, rng: RngStream | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """
    Top-K direcciones principales (K x cols) y scores por fila (rows x K) de X
    con columnas centradas. Exacto si min(rows, cols) <= 512; si no, iteracion
    de subespacio aleatorizada con centrado implicito.
    """
    rows, cols = X.shape
    if not 0 <= K <= min(rows, cols):
        raise DimensionError(f"K={K} fuera de rango para matriz {rows}x{cols}")
    if K == 0:
        return np.zeros((0, cols)), np.zeros((rows, 0))

    means = _column_means(X)
    if min(rows, cols) <= EXACT_PCA_LIMIT:
        Xc = X.astype(np.float64) - means
        U, S, Vt = linalg.svd(Xc, full_matrices=False)
        components = Vt[:K].copy()
        scores = U[:, :K] * S[:K]
    else:
        rng = rng or RngStream(0)
        width = min(K + PCA_OVERSAMPLES, rows, cols)
        Q = rng.generator.standard_normal((cols, width))
        Y, _ = linalg.qr(_centered_matmul(X, means, Q), mode="economic")
        for _ in range(PCA_POWER_ITERS):
            Z, _ = linalg.qr(_centered_rmatmul(X, means, Y), mode="economic")
            Y, _ = linalg.qr(_centered_matmul(X, means, Z), mode="economic")
        B = _centered_rmatmul(X, means, Y).T  # width x cols
        Ub, S, Vt = linalg.svd(B, full_matrices=False)
        components = Vt[:K].copy()
        scores = (Y @ Ub[:, :K]) * S[:K]

    _fix_signs(components, scores)
    return components, scores


def kmeans(points: np.ndarray, K: int, rng: RngStream, restarts: int = KMEANS_RESTARTS) -> np.ndarray:
    """Lloyd con semillas k-means++; mejor de `restarts` corridas por inercia."""
    if K < 1:
        raise DomainError(f"K-means requiere K >= 1, se recibio {K}")
    points = np.asarray(points, dtype=np.float64)
    if K > points.shape[0]:
        raise DomainError(f"K={K} mayor que el numero de puntos ({points.shape[0]})")
    if K == 1:
        return np.zeros(points.shape[0], dtype=np.int64)
    model = KMeans(
        n_clusters=K,
        init="k-means++",
        n_init=restarts,
        max_iter=KMEANS_MAX_ITER,
        random_state=rng.integer_seed(),
    )
    return model.fit_predict(points).astype(np.int64)


@dataclass
class OlsResult:
    coef: np.ndarray
    se: np.ndarray
    t: np.ndarray
    p_value: np.ndarray
    df: int


def t_pvalues(coef: np.ndarray, se: np.ndarray, df: int) -> tuple[np.ndarray, np.ndarray]:
    """Estadistico t y p-valor bilateral; se = 0 da p = 0 (o 1 si coef = 0)."""
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(se > 0, coef / np.where(se > 0, se, 1.0), np.where(coef == 0, 0.0, np.inf * np.sign(coef)))
    p = 2.0 * stats.t.sf(np.abs(t), df)
    return t, np.clip(p, 0.0, 1.0)


def checked_qr(A: np.ndarray, rtol: float = 1e-10) -> tuple[np.ndarray, np.ndarray]:
    """QR reducida; SingularityError con la primera columna dependiente de las anteriores."""
    Q, R = linalg.qr(A, mode="economic")
    diag = np.abs(np.diag(R))
    scale = max(diag.max(initial=0.0), 1e-300)
    for j in range(A.shape[1]):
        if diag[j] <= rtol * scale:
            raise SingularityError(f"Covariable {j} es linealmente dependiente de las anteriores", column=j)
    return Q, R


def ols_ttest(y: np.ndarray, covariates: np.ndarray, rtol: float = 1e-10) -> OlsResult:
    """
    Minimos cuadrados de y sobre las columnas de `covariates` (el llamador
    incluye el intercepto) y test t bilateral por coeficiente con n - p g.l.
    """
    y = np.asarray(y, dtype=np.float64)
    Xd = np.asarray(covariates, dtype=np.float64)
    if Xd.ndim != 2 or Xd.shape[0] != y.shape[0]:
        raise DimensionError(f"covariates {Xd.shape} incompatible con y de largo {y.shape[0]}")
    n, p = Xd.shape
    if n <= p:
        raise DimensionError(f"Se necesitan mas filas ({n}) que covariables ({p})")

    Q, R = checked_qr(Xd, rtol)
    coef = linalg.solve_triangular(R, Q.T @ y)
    resid = y - Xd @ coef
    df = n - p
    sigma2 = float(resid @ resid) / df
    R_inv = linalg.solve_triangular(R, np.eye(p))
    se = np.sqrt(sigma2 * (R_inv**2).sum(axis=1))
    t, p_value = t_pvalues(coef, se, df)
    return OlsResult(coef=coef, se=se, t=t, p_value=p_value, df=df)
