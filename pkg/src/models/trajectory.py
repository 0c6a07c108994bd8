"""
Trayectorias de lazo cerrado
"""
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ..exceptions import DimensionError


@dataclass
class Trajectory:
    """
    Secuencias indexadas por k = 0..T-1

    Attributes:
        x: Estados (T, n)
        u: Entradas aplicadas (T, m)
        y: Salidas (T, n_y)
        u_b: Entradas de refuerzo proyectadas (T, m)
        u_tilde_b: Salidas del operador antes de proyectar (T, m)
        w: Perturbaciones (T, n)
        w_e: Señal exógena reconstruida (T, n), opcional
    """
    x: np.ndarray
    u: np.ndarray
    y: np.ndarray
    u_b: np.ndarray
    u_tilde_b: np.ndarray
    w: np.ndarray
    w_e: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        for name in ('x', 'u', 'y', 'u_b', 'u_tilde_b', 'w'):
            value = np.array(getattr(self, name), dtype=float)
            if value.ndim != 2:
                raise DimensionError(f"{name} debe ser una matriz (T, dim)")
            setattr(self, name, value)
        if self.w_e is not None:
            self.w_e = np.array(self.w_e, dtype=float)

        self._validate_dimensions()

    def _validate_dimensions(self) -> None:
        T = self.x.shape[0]
        for name in ('u', 'y', 'u_b', 'u_tilde_b', 'w'):
            if getattr(self, name).shape[0] != T:
                raise DimensionError(f"Longitud inconsistente en {name}: se esperaba T={T}")

        if self.w.shape[1] != self.n:
            raise DimensionError("w debe tener la dimensión del estado")
        if self.u_b.shape[1] != self.m or self.u_tilde_b.shape[1] != self.m:
            raise DimensionError("u_b y u_tilde_b deben tener la dimensión de la entrada")
        if self.w_e is not None and self.w_e.shape != self.x.shape:
            raise DimensionError("w_e debe tener la forma de x")

    @property
    def horizon(self) -> int:
        return self.x.shape[0]

    @property
    def n(self) -> int:
        return self.x.shape[1]

    @property
    def m(self) -> int:
        return self.u.shape[1]

    @property
    def n_y(self) -> int:
        return self.y.shape[1]

    def delta_x(self, x_bar: np.ndarray) -> np.ndarray:
        return self.x - np.asarray(x_bar, dtype=float)

    def delta_u(self, u_bar: np.ndarray) -> np.ndarray:
        return self.u - np.asarray(u_bar, dtype=float)

    def exogenous(self, x_bar: np.ndarray) -> np.ndarray:
        """Secuencia w_e = (Δx(0), w(0), ..., w(T-2))"""
        if self.horizon == 0:
            return np.zeros((0, self.n))
        return np.vstack([self.delta_x(x_bar)[:1], self.w[:-1]])

    @classmethod
    def empty(cls, n: int, m: int, n_y: int) -> "Trajectory":
        return cls(
            x=np.zeros((0, n)), u=np.zeros((0, m)), y=np.zeros((0, n_y)),
            u_b=np.zeros((0, m)), u_tilde_b=np.zeros((0, m)), w=np.zeros((0, n)),
        )
