"""
Jerarquía de errores del paquete
"""
from typing import Optional


class BoostControlError(Exception):
    """Error base del paquete"""


class DimensionError(BoostControlError, ValueError):
    """Entrada rechazada por dimensiones inconsistentes"""


class EquilibriumNotFoundError(BoostControlError):
    """La iteración de Newton no encontró un equilibrio"""

    def __init__(self, message: str, residual: float):
        super().__init__(f"{message} (último residuo: {residual:.3e})")
        self.residual = residual


class InfeasibleEquilibriumError(BoostControlError, ValueError):
    """El equilibrio no está estrictamente dentro del politopo de entrada"""


class LocalityViolationError(BoostControlError):
    """Violación previa de la condición 6g para un canal"""

    def __init__(self, channel: int, vbar: float, bias: float):
        super().__init__(
            f"condición 6g violada en el canal {channel}: "
            f"v̄={vbar:.6g} < |Ã_i x̄ + B̃_i ū|={bias:.6g}"
        )
        self.channel = channel
        self.margin = vbar - bias


class BoxTooLargeError(BoostControlError):
    """La caja de refuerzo deja margen no positivo en alguna fila de entrada"""

    def __init__(self, row: int, margin: float):
        super().__init__(
            f"Caja de refuerzo demasiado grande: margen de la fila {row} = {margin:.6g}"
        )
        self.row = row
        self.margin = margin


class SolverError(BoostControlError):
    """Falla numérica del backend (distinta de la infactibilidad certificada)"""


class SynthesisFailedError(BoostControlError):
    """El procedimiento de síntesis agotó sus calendarios"""

    def __init__(self, message: str, report: Optional[object] = None):
        super().__init__(message)
        self.report = report


class DegenerateCertificateError(BoostControlError):
    """Constantes de estabilidad degeneradas (ã >= 1)"""


class RpiViolationError(BoostControlError):
    """Estado inicial fuera del conjunto RPI"""


class TrainingDivergedError(BoostControlError):
    """NaN/Inf en la pérdida o en los gradientes"""

    def __init__(self, epoch: int, message: str = "Entrenamiento divergente"):
        super().__init__(f"{message} en la época {epoch}")
        self.epoch = epoch


class BundleError(BoostControlError):
    """Artefacto de bundle ausente o ilegible"""
