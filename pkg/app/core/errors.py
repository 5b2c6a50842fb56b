"""
Jerarquia de errores del paquete. Cada error lleva el codigo de salida del CLI.
"""

from typing import Any


class IcmError(Exception):
    exit_code = 1


class ConfigError(IcmError):
    """Configuracion invalida o inconsistente."""


class DimensionError(IcmError, ValueError):
    """Formas de matrices incompatibles."""


class DomainError(IcmError, ValueError):
    """Parametro fuera de su dominio."""


class NumericError(IcmError, ArithmeticError):
    """Valores no finitos durante el calculo."""

    exit_code = 2

    def __init__(self, message: str, block: str | None = None, snapshot: Any = None):
        super().__init__(message if block is None else f"{message} (bloque: {block})")
        self.block = block
        self.snapshot = snapshot


class SingularityError(NumericError):
    """Matriz de diseno sin rango completo."""

    def __init__(self, message: str, column: int):
        super().__init__(message, block=f"columna {column}")
        self.column = column


class StorageError(IcmError, OSError):
    """Archivo ilegible, corrupto o no escribible."""

    exit_code = 3
