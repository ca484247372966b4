"""
Paquete de manejadores de la CLI.
Un manejador por subcomando; todos devuelven el código de salida del proceso.
"""

from .cli import build_parser, main

__all__ = [
    "build_parser",
    "main",
]
