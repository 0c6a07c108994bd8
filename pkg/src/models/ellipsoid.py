"""
Geometría de elipsoides
E(S) ⊕ c = {v : (v - c)ᵀ S (v - c) <= 1} con S simétrica definida positiva
"""
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.linalg import cholesky, solve_triangular

from ..exceptions import DimensionError


@dataclass(frozen=True)
class Ellipsoid:
    """Elipsoide con matriz de forma y centro"""
    shape: np.ndarray
    center: np.ndarray

    def __post_init__(self):
        shape = np.array(self.shape, dtype=float)
        center = np.array(self.center, dtype=float)

        if shape.ndim != 2 or shape.shape[0] != shape.shape[1]:
            raise DimensionError("La matriz de forma debe ser cuadrada")
        if center.shape != (shape.shape[0],):
            raise DimensionError(
                f"Centro de dimensión {center.shape}, se esperaba ({shape.shape[0]},)"
            )
        if not np.allclose(shape, shape.T, rtol=1e-10, atol=1e-12 * max(1.0, np.abs(shape).max())):
            raise ValueError("La matriz de forma debe ser simétrica")

        shape = (shape + shape.T) / 2.0
        try:
            factor = cholesky(shape, lower=True)
        except np.linalg.LinAlgError:
            raise ValueError("La matriz de forma debe ser definida positiva")

        object.__setattr__(self, 'shape', shape)
        object.__setattr__(self, 'center', center)
        object.__setattr__(self, '_factor', factor)

    @classmethod
    def centered(cls, shape: np.ndarray) -> "Ellipsoid":
        """Elipsoide centrado en el origen"""
        shape = np.asarray(shape, dtype=float)
        return cls(shape, np.zeros(shape.shape[0]))

    @property
    def dim(self) -> int:
        return self.shape.shape[0]

    def level(self, v: np.ndarray) -> np.ndarray:
        """
        Valor de la forma cuadrática (v - c)ᵀ S (v - c)

        Args:
            v: Punto (d,) o lote (N, d)

        Returns:
            Escalar o vector (N,)
        """
        d = np.asarray(v, dtype=float) - self.center
        return np.einsum('...i,ij,...j->...', d, self.shape, d)

    def contains(self, v: np.ndarray, tol: float = 0.0) -> np.ndarray:
        """Pertenencia con tolerancia absoluta sobre el nivel"""
        return self.level(v) <= 1.0 + tol

    def violation(self, v: np.ndarray) -> np.ndarray:
        """Exceso max(nivel - 1, 0)"""
        return np.maximum(self.level(v) - 1.0, 0.0)

    def support(self, direction: np.ndarray) -> float:
        """Función soporte max{gᵀv : v ∈ E} = gᵀc + sqrt(gᵀ S⁻¹ g)"""
        g = np.asarray(direction, dtype=float)
        z = solve_triangular(self._factor, g, lower=True)
        return float(g @ self.center + np.sqrt(z @ z))

    def map_unit_ball(self, z: np.ndarray) -> np.ndarray:
        """Transforma puntos de la bola unidad: v = c + L⁻ᵀ z con S = L Lᵀ"""
        z = np.atleast_2d(np.asarray(z, dtype=float))
        v = solve_triangular(self._factor.T, z.T, lower=False).T
        return v + self.center

    def sample(self, count: int, rng: np.random.Generator,
               surface_fraction: float = 0.0) -> np.ndarray:
        """
        Muestreo uniforme en el interior (y opcionalmente en la frontera)

        Args:
            count: Número de muestras
            rng: Generador de numpy
            surface_fraction: Fracción de muestras colocadas sobre la frontera

        Returns:
            Arreglo (count, d)
        """
        if count == 0:
            return np.zeros((0, self.dim))

        directions = rng.standard_normal((count, self.dim))
        directions /= np.linalg.norm(directions, axis=1, keepdims=True)

        radii = rng.uniform(size=count) ** (1.0 / self.dim)
        n_surface = int(round(surface_fraction * count))
        radii[:n_surface] = 1.0

        return self.map_unit_ball(directions * radii[:, np.newaxis])

    def scaled(self, factor: float, center: Optional[np.ndarray] = None) -> "Ellipsoid":
        """Elipsoide E(S / factor) con centro opcional"""
        return Ellipsoid(self.shape / factor, self.center if center is None else center)
