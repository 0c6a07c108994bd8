"""
Generación de benchmarks sintéticos
Plantas RNN aleatorias con equilibrio y restricciones admisibles
"""
import logging
from typing import List, Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, Field, model_validator

from ..exceptions import BoostControlError, EquilibriumNotFoundError
from ..models.rnn_model import ConstraintSets, Equilibrium, RnnModel, find_equilibrium

logger = logging.getLogger(__name__)


class BenchmarkSpec(BaseModel):
    """Especificación de un benchmark aleatorio"""
    seed: int = Field(0, ge=0, description="Semilla del generador")
    n: int = Field(4, ge=1, description="Estados")
    m: int = Field(1, ge=1, description="Entradas")
    nu: int = Field(2, ge=1, description="Canales tanh")
    n_y: int = Field(1, ge=1, description="Salidas")
    spectral_radius: float = Field(0.8, gt=0.0, description="Radio espectral objetivo")
    radius_of: Literal["A", "A_x"] = Field("A", description="Matriz cuyo radio espectral se fija")
    nonlinearity_gain: float = Field(0.2, ge=0.0, description="Escala de B_sigma")
    u_min: List[float] = Field(default_factory=lambda: [-1.0])
    u_max: List[float] = Field(default_factory=lambda: [1.0])
    y_min: Optional[List[float]] = Field(None, description="None: ȳ - y_margin")
    y_max: Optional[List[float]] = Field(None, description="None: ȳ + y_margin")
    y_margin: float = Field(1.0, gt=0.0)
    w_bound: float = Field(0.01, gt=0.0, description="Radio euclídeo de la perturbación")
    u_bar: Optional[List[float]] = Field(None, description="Entrada de equilibrio (None: punto medio)")
    u_M: Optional[float] = Field(None, gt=0.0, description="Cota de la entrada de refuerzo")
    max_attempts: int = Field(10, ge=1, description="Intentos de regeneración")

    @model_validator(mode="after")
    def _check_lengths(self) -> "BenchmarkSpec":
        if len(self.u_min) != self.m or len(self.u_max) != self.m:
            raise ValueError("u_min y u_max deben tener m elementos")
        if any(lo >= hi for lo, hi in zip(self.u_min, self.u_max)):
            raise ValueError("u_min debe ser menor que u_max")
        if (self.y_min is None) != (self.y_max is None):
            raise ValueError("y_min e y_max se dan juntos")
        if self.y_min is not None and (len(self.y_min) != self.n_y or len(self.y_max) != self.n_y):
            raise ValueError("y_min e y_max deben tener n_y elementos")
        if self.u_bar is not None and len(self.u_bar) != self.m:
            raise ValueError("u_bar debe tener m elementos")
        return self

    @classmethod
    def ph_like(cls, seed: int = 0) -> "BenchmarkSpec":
        """Preajuste con las dimensiones y cotas de la neutralización de pH"""
        return cls(
            seed=seed, n=10, m=1, nu=5, n_y=1,
            u_min=[12.5], u_max=[17.0], y_min=[5.94], y_max=[9.13],
            w_bound=0.01, u_M=0.0912,
        )


def _spectral_radius(M: np.ndarray) -> float:
    return float(np.max(np.abs(np.linalg.eigvals(M))))


def _draw_model(spec: BenchmarkSpec, rng: np.random.Generator) -> RnnModel:
    n, m, nu, n_y = spec.n, spec.m, spec.nu, spec.n_y

    A_x = rng.standard_normal((n, n)) / np.sqrt(n)
    B_u = rng.standard_normal((n, m))
    B_sigma = spec.nonlinearity_gain * rng.standard_normal((n, nu)) / np.sqrt(nu)
    A_tilde = rng.standard_normal((nu, n)) / np.sqrt(n)
    B_tilde = rng.standard_normal((nu, m)) / np.sqrt(m)
    C = rng.standard_normal((n_y, n)) / np.sqrt(n)

    # Escalar A_x y Ã juntos escala A = A_x + B_σ Ã por el mismo factor
    reference = A_x + B_sigma @ A_tilde if spec.radius_of == "A" else A_x
    radius = _spectral_radius(reference)
    if radius < 1e-12:
        raise BoostControlError("Radio espectral nulo")
    scale = spec.spectral_radius / radius

    return RnnModel(A_x * scale, B_u, B_sigma, A_tilde * scale, B_tilde, C, ["tanh"] * nu)


def _rescale_output(model: RnnModel, x_bar: np.ndarray, targets: np.ndarray) -> RnnModel:
    """Escala cada fila de C para que ȳ coincida con el objetivo"""
    raw = model.C @ x_bar
    if np.any(np.abs(raw) < 1e-6 * max(1.0, np.linalg.norm(x_bar))):
        raise BoostControlError("Salida de equilibrio casi nula; no se puede reescalar C")
    C = model.C * (targets / raw)[:, np.newaxis]
    return RnnModel(model.A_x, model.B_u, model.B_sigma, model.A_tilde, model.B_tilde, C,
                    model.activations)


def generate_benchmark(spec: BenchmarkSpec) -> Tuple[RnnModel, Equilibrium, ConstraintSets]:
    """
    Genera planta, equilibrio y restricciones

    Si el equilibrio falla se regenera con una subsemilla nueva, hasta
    spec.max_attempts intentos.

    Returns:
        (RnnModel, Equilibrium, ConstraintSets)
    """
    u_min, u_max = np.array(spec.u_min), np.array(spec.u_max)
    u_bar = (u_min + u_max) / 2.0 if spec.u_bar is None else np.array(spec.u_bar, dtype=float)

    last_error: Optional[Exception] = None
    for attempt, child in enumerate(np.random.SeedSequence(spec.seed).spawn(spec.max_attempts)):
        rng = np.random.default_rng(child)
        try:
            model = _draw_model(spec, rng)
            equilibrium = find_equilibrium(model, u_bar)

            if spec.y_min is not None:
                y_min, y_max = np.array(spec.y_min), np.array(spec.y_max)
                model = _rescale_output(model, equilibrium.x_bar, (y_min + y_max) / 2.0)
                equilibrium = find_equilibrium(model, u_bar, x_init=equilibrium.x_bar)
            else:
                y_min = equilibrium.y_bar - spec.y_margin
                y_max = equilibrium.y_bar + spec.y_margin

            constraints = ConstraintSets.from_bounds(u_min, u_max, y_min, y_max, spec.w_bound, spec.n)
            constraints.validate_equilibrium(equilibrium)
        except (EquilibriumNotFoundError, BoostControlError, ValueError) as exc:
            logger.info("Intento %d de generación descartado: %s", attempt, exc)
            last_error = exc
            continue

        logger.info("Benchmark generado en el intento %d (n=%d, ν=%d)", attempt, spec.n, spec.nu)
        return model, equilibrium, constraints

    raise BoostControlError(
        f"No se pudo generar el benchmark tras {spec.max_attempts} intentos: {last_error}"
    )
