"""
Formateo de salidas de consola y resumenes de texto que acompanan a cada archivo.
"""

import math
from typing import Any

import numpy as np

from app.services.simgen import membership_sparsity


def format_float(value: Any, digits: int = 4) -> str:
    """Formatea un real; NaN y None se muestran como NA."""
    try:
        v = float(value)
    except (ValueError, TypeError):
        return "NA"
    if math.isnan(v):
        return "NA"
    return f"{v:.{digits}g}"


def table_to_text(columns: list[str], rows: list[dict], max_rows: int = 40) -> str:
    """
    Convierte filas a una tabla de texto alineada para la consola.
    """
    if not rows:
        return "Sin resultados"

    display_rows = rows[:max_rows]

    def cell(row: dict, col: str) -> str:
        val = row.get(col, "")
        val = format_float(val) if isinstance(val, (float, np.floating)) else str(val)
        if len(val) > 25:
            val = val[:22] + "..."
        return val

    widths = {col: max([len(col)] + [len(cell(row, col)) for row in display_rows]) for col in columns}

    header = " | ".join(col.ljust(widths[col]) for col in columns)
    separator = "-+-".join("-" * widths[col] for col in columns)
    lines = [header, separator]
    for row in display_rows:
        lines.append(" | ".join(cell(row, col).ljust(widths[col]) for col in columns))

    if len(rows) > max_rows:
        lines.append(f"... (+{len(rows) - max_rows} filas mas)")
    return "\n".join(lines)


def histogram_text(values: np.ndarray, bins: int = 10, lo: float = 0.0, hi: float = 1.0, width: int = 40) -> str:
    counts, edges = np.histogram(values, bins=bins, range=(lo, hi))
    peak = max(int(counts.max()), 1)
    lines = []
    for count, left, right in zip(counts, edges[:-1], edges[1:]):
        bar = "#" * int(round(width * count / peak))
        lines.append(f"[{left:.2f}, {right:.2f}) {int(count):>8} {bar}")
    return "\n".join(lines)


def dataset_summary(genotypes: np.ndarray, traits: np.ndarray | None, S: np.ndarray | None, family: str, a: float) -> str:
    """Histograma de frecuencias alelicas, momentos del rasgo y membresia maxima media."""
    freqs = np.asarray(genotypes, dtype=np.float64).mean(axis=0) / 2.0
    N, M = genotypes.shape
    lines = [
        f"familia: {family}",
        f"a: {a:g}",
        f"individuos: {N}",
        f"snps: {M}",
        "",
        "frecuencia alelica por SNP:",
        histogram_text(freqs),
    ]
    if traits is not None:
        y = np.asarray(traits, dtype=np.float64)
        centered = y - y.mean()
        sd = y.std()
        skew = float((centered ** 3).mean() / sd ** 3) if sd > 0 else math.nan
        lines += [
            "",
            "rasgo:",
            f"  media: {format_float(y.mean(), 6)}",
            f"  varianza: {format_float(y.var(), 6)}",
            f"  asimetria: {format_float(skew, 6)}",
            f"  min: {format_float(y.min(), 6)}",
            f"  max: {format_float(y.max(), 6)}",
        ]
    if S is not None:
        lines += ["", f"membresia maxima media: {membership_sparsity(S):.6f}"]
    return "\n".join(lines) + "\n"


def assoc_summary(method: str, num_snps: int, discoveries: int, threshold: float, lambda_gc: float, precision: float | None) -> str:
    text = (
        f"{method}: {discoveries}/{num_snps} SNPs con p <= {threshold:g}, "
        f"lambda_GC = {format_float(lambda_gc)}"
    )
    if precision is not None:
        text += f", precision = {format_float(precision)}"
    return text
