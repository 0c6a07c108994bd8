"""
Modelo RNN de la planta
Implementa la clase de modelos recurrentes con activaciones sigmoidales
desacopladas, el cálculo de equilibrios y los conjuntos de restricciones
"""
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from scipy.optimize import linprog
from scipy.special import erf

from ..exceptions import DimensionError, EquilibriumNotFoundError, InfeasibleEquilibriumError

logger = logging.getLogger(__name__)

_ERF_SCALE = np.sqrt(np.pi) / 2.0


@dataclass(frozen=True)
class Activation:
    """Descriptor de una sigmoide escalar con derivadas analíticas"""
    tag: str
    fn: Callable[[np.ndarray], np.ndarray]
    derivative: Callable[[np.ndarray], np.ndarray]
    q_derivative: Callable[[np.ndarray], np.ndarray]  # 1 - σ'(v), sin cancelación
    torch_fn: Callable[[torch.Tensor], torch.Tensor]

    def __call__(self, v):
        return self.fn(v)


ACTIVATIONS: Dict[str, Activation] = {
    "tanh": Activation(
        tag="tanh",
        fn=np.tanh,
        derivative=lambda v: 1.0 - np.tanh(v) ** 2,
        q_derivative=lambda v: np.tanh(v) ** 2,
        torch_fn=torch.tanh,
    ),
    "erf": Activation(
        tag="erf",
        fn=lambda v: erf(_ERF_SCALE * np.asarray(v, dtype=float)),
        derivative=lambda v: np.exp(-np.pi * np.asarray(v, dtype=float) ** 2 / 4.0),
        q_derivative=lambda v: -np.expm1(-np.pi * np.asarray(v, dtype=float) ** 2 / 4.0),
        torch_fn=lambda v: torch.special.erf(_ERF_SCALE * v),
    ),
    "isru": Activation(
        tag="isru",
        fn=lambda v: np.asarray(v, dtype=float) / np.sqrt(1.0 + np.asarray(v, dtype=float) ** 2),
        derivative=lambda v: (1.0 + np.asarray(v, dtype=float) ** 2) ** -1.5,
        q_derivative=lambda v: 1.0 - (1.0 + np.asarray(v, dtype=float) ** 2) ** -1.5,
        torch_fn=lambda v: v / torch.sqrt(1.0 + v ** 2),
    ),
}


def get_activation(activation: Union[str, Activation]) -> Activation:
    """
    Obtiene un descriptor de activación del conjunto cerrado

    Args:
        activation: Etiqueta ("tanh", "erf", "isru") o descriptor

    Returns:
        Descriptor de activación
    """
    if isinstance(activation, Activation):
        return activation

    if activation not in ACTIVATIONS:
        raise ValueError(
            f"Activación desconocida: {activation!r}. Disponibles: {sorted(ACTIVATIONS)}"
        )

    return ACTIVATIONS[activation]


def q_deriv(activation: Union[str, Activation], v):
    """
    Derivada de q(v) = v - σ(v), es decir 1 - σ'(v) ∈ [0, 1)

    Args:
        activation: Descriptor o etiqueta de la activación
        v: Escalar o arreglo

    Returns:
        Valor(es) de 1 - σ'(v)
    """
    return get_activation(activation).q_derivative(v)


def _as_matrix(value, rows: int, cols: int, name: str) -> np.ndarray:
    """Convierte a matriz densa float respetando dimensiones vacías"""
    matrix = np.array(value, dtype=float)

    if matrix.size == 0:
        matrix = matrix.reshape(rows, cols)

    if matrix.ndim != 2 or matrix.shape != (rows, cols):
        raise DimensionError(
            f"Dimensiones inconsistentes: {name} es {matrix.shape}, se esperaba ({rows}, {cols})"
        )

    return matrix


class RnnModel:
    """
    Planta RNN en tiempo discreto

        x(k+1) = A_x x + B_u u + B_σ σ(Ã x + B̃ u) + w
        y(k)   = C x

    Las matrices derivadas A = A_x + B_σ Ã, B = B_u + B_σ B̃ y B_q = -B_σ
    se calculan en la construcción. Todas las matrices son de solo lectura.
    """

    def __init__(self,
                 A_x: np.ndarray,
                 B_u: np.ndarray,
                 B_sigma: np.ndarray,
                 A_tilde: np.ndarray,
                 B_tilde: np.ndarray,
                 C: np.ndarray,
                 activations: Sequence[Union[str, Activation]]):
        """
        Inicializa el modelo

        Args:
            A_x: Matriz de estado (n x n)
            B_u: Matriz de entrada (n x m)
            B_sigma: Matriz de las no linealidades (n x ν)
            A_tilde: Matriz de preactivación del estado (ν x n)
            B_tilde: Matriz de preactivación de la entrada (ν x m)
            C: Matriz de salida (n_y x n)
            activations: Lista de ν activaciones
        """
        self.activations: Tuple[Activation, ...] = tuple(get_activation(a) for a in activations)

        A_x = np.array(A_x, dtype=float)
        B_u = np.array(B_u, dtype=float)
        C = np.array(C, dtype=float)
        if A_x.ndim != 2 or B_u.ndim != 2 or C.ndim != 2:
            raise DimensionError("A_x, B_u y C deben ser matrices")

        n, m, nu, n_y = A_x.shape[0], B_u.shape[1], len(self.activations), C.shape[0]

        self.A_x = _as_matrix(A_x, n, n, "A_x")
        self.B_u = _as_matrix(B_u, n, m, "B_u")
        self.B_sigma = _as_matrix(B_sigma, n, nu, "B_sigma")
        self.A_tilde = _as_matrix(A_tilde, nu, n, "A_tilde")
        self.B_tilde = _as_matrix(B_tilde, nu, m, "B_tilde")
        self.C = _as_matrix(C, n_y, n, "C")

        self._validate_dimensions()

        # Forma reformulada
        self.A = self.A_x + self.B_sigma @ self.A_tilde
        self.B = self.B_u + self.B_sigma @ self.B_tilde
        self.B_q = -self.B_sigma

        for matrix in (self.A_x, self.B_u, self.B_sigma, self.A_tilde,
                       self.B_tilde, self.C, self.A, self.B, self.B_q):
            matrix.setflags(write=False)

    def _validate_dimensions(self) -> None:
        """Valida las dimensiones mínimas"""
        if self.n < 1 or self.m < 1 or self.n_y < 1:
            raise DimensionError(
                f"Dimensiones inválidas: n={self.n}, m={self.m}, n_y={self.n_y}"
            )

    @property
    def n(self) -> int:
        return self.A_x.shape[0]

    @property
    def m(self) -> int:
        return self.B_u.shape[1]

    @property
    def nu(self) -> int:
        return len(self.activations)

    @property
    def n_y(self) -> int:
        return self.C.shape[0]

    def _check_last_dim(self, value, size: int, name: str) -> np.ndarray:
        array = np.asarray(value, dtype=float)
        if array.ndim == 0 or array.shape[-1] != size:
            raise DimensionError(
                f"Dimensión inválida para {name}: {array.shape}, se esperaba (..., {size})"
            )
        return array

    def _per_channel(self, v: np.ndarray, attr: str) -> np.ndarray:
        if self.nu == 0:
            return np.zeros_like(v)
        return np.stack(
            [getattr(act, attr)(v[..., i]) for i, act in enumerate(self.activations)],
            axis=-1,
        )

    def sigma(self, v: np.ndarray) -> np.ndarray:
        """Aplica σ canal por canal (admite lotes en la primera dimensión)"""
        return self._per_channel(self._check_last_dim(v, self.nu, "v"), "fn")

    def sigma_prime(self, v: np.ndarray) -> np.ndarray:
        """Derivada σ'(v) canal por canal"""
        return self._per_channel(self._check_last_dim(v, self.nu, "v"), "derivative")

    def q(self, v: np.ndarray) -> np.ndarray:
        """Zona muerta generalizada q(v) = v - σ(v)"""
        v = self._check_last_dim(v, self.nu, "v")
        return v - self.sigma(v)

    def preactivation(self, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        """Calcula v = Ã x + B̃ u"""
        x = self._check_last_dim(x, self.n, "x")
        u = self._check_last_dim(u, self.m, "u")
        return x @ self.A_tilde.T + u @ self.B_tilde.T

    def step(self, x: np.ndarray, u: np.ndarray, w: Optional[np.ndarray] = None) -> np.ndarray:
        """
        Avanza un paso la planta en su forma original

        Args:
            x: Estado (n,) o lote (S, n)
            u: Entrada (m,) o lote (S, m)
            w: Perturbación (n,) o lote; None equivale a cero

        Returns:
            Estado siguiente
        """
        x = self._check_last_dim(x, self.n, "x")
        u = self._check_last_dim(u, self.m, "u")
        v = self.preactivation(x, u)

        x_next = x @ self.A_x.T + u @ self.B_u.T + self.sigma(v) @ self.B_sigma.T
        if w is not None:
            x_next = x_next + self._check_last_dim(w, self.n, "w")

        return x_next

    def step_reformulated(self, x: np.ndarray, u: np.ndarray,
                          w: Optional[np.ndarray] = None) -> np.ndarray:
        """Avanza un paso con la forma x+ = A x + B u + B_q q(v) + w"""
        x = self._check_last_dim(x, self.n, "x")
        u = self._check_last_dim(u, self.m, "u")
        v = self.preactivation(x, u)

        x_next = x @ self.A.T + u @ self.B.T + self.q(v) @ self.B_q.T
        if w is not None:
            x_next = x_next + self._check_last_dim(w, self.n, "w")

        return x_next

    def output(self, x: np.ndarray) -> np.ndarray:
        """Salida y = C x"""
        return self._check_last_dim(x, self.n, "x") @ self.C.T

    def error_step(self, equilibrium: "Equilibrium", dx: np.ndarray, du: np.ndarray) -> np.ndarray:
        """
        Dinámica del error f_e(Δx, Δu) alrededor de un equilibrio

        Returns:
            Δx(k+1) sin perturbación
        """
        return self.step(equilibrium.x_bar + dx, equilibrium.u_bar + du) - equilibrium.x_bar

    def to_dict(self, equilibrium: Optional["Equilibrium"] = None) -> dict:
        """Serializa el modelo (matrices fila-mayor y etiquetas)"""
        data = {
            'A_x': self.A_x.tolist(),
            'B_u': self.B_u.tolist(),
            'B_sigma': self.B_sigma.tolist(),
            'A_tilde': self.A_tilde.tolist(),
            'B_tilde': self.B_tilde.tolist(),
            'C': self.C.tolist(),
            'activations': [act.tag for act in self.activations],
        }
        if equilibrium is not None:
            data['equilibrium'] = equilibrium.to_dict()
        return data

    @classmethod
    def from_dict(cls, data: dict) -> Tuple["RnnModel", Optional["Equilibrium"]]:
        """Reconstruye el modelo y, si existe, el bloque de equilibrio"""
        model = cls(
            data['A_x'], data['B_u'], data['B_sigma'],
            data['A_tilde'], data['B_tilde'], data['C'],
            data['activations'],
        )
        equilibrium = None
        if data.get('equilibrium') is not None:
            equilibrium = Equilibrium.from_dict(data['equilibrium'])
        return model, equilibrium


@dataclass(frozen=True)
class Equilibrium:
    """Equilibrio (x̄, ū, ȳ) con la preactivación v̄ y el residuo del punto fijo"""
    x_bar: np.ndarray
    u_bar: np.ndarray
    y_bar: np.ndarray
    v_bar: np.ndarray
    residual: float

    def to_dict(self) -> dict:
        return {
            'x_bar': self.x_bar.tolist(),
            'u_bar': self.u_bar.tolist(),
            'y_bar': self.y_bar.tolist(),
            'v_bar': self.v_bar.tolist(),
            'residual': float(self.residual),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Equilibrium":
        return cls(
            x_bar=np.array(data['x_bar'], dtype=float),
            u_bar=np.array(data['u_bar'], dtype=float),
            y_bar=np.array(data['y_bar'], dtype=float),
            v_bar=np.array(data['v_bar'], dtype=float),
            residual=float(data['residual']),
        )


def find_equilibrium(model: RnnModel,
                     u_bar: np.ndarray,
                     x_init: Optional[np.ndarray] = None,
                     max_iter: int = 200,
                     tol: float = 1e-10) -> Equilibrium:
    """
    Calcula el equilibrio asociado a ū mediante Newton amortiguado

    El paso se divide a la mitad hasta que el residuo disminuye; si con
    paso 2^-20 el residuo no baja, el método se declara estancado.

    Args:
        model: Planta RNN
        u_bar: Entrada de equilibrio (m,)
        x_init: Estimación inicial (n,); por defecto el origen
        max_iter: Máximo de iteraciones
        tol: Tolerancia del residuo

    Returns:
        Equilibrium con residuo <= tol
    """
    u_bar = model._check_last_dim(u_bar, model.m, "u_bar").copy()
    x = np.zeros(model.n) if x_init is None else model._check_last_dim(x_init, model.n, "x_init").copy()

    def residual_vector(state: np.ndarray) -> np.ndarray:
        return state - model.step(state, u_bar)

    identity = np.eye(model.n)
    F = residual_vector(x)
    res = float(np.linalg.norm(F))

    for iteration in range(max_iter):
        if res <= tol:
            break

        slopes = model.sigma_prime(model.preactivation(x, u_bar))
        J = identity - model.A_x - model.B_sigma @ np.diag(slopes) @ model.A_tilde

        try:
            dx = np.linalg.solve(J, -F)
        except np.linalg.LinAlgError:
            raise EquilibriumNotFoundError("No se encontró equilibrio: jacobiano singular", res)

        t = 1.0
        while True:
            x_new = x + t * dx
            F_new = residual_vector(x_new)
            res_new = float(np.linalg.norm(F_new))
            if res_new < res:
                break
            if t <= 2.0 ** -20:
                raise EquilibriumNotFoundError(
                    f"No se encontró equilibrio: Newton estancado en la iteración {iteration}", res
                )
            t /= 2.0

        x, F, res = x_new, F_new, res_new

    # Pulido final: un paso adicional si reduce el residuo
    if res <= tol:
        slopes = model.sigma_prime(model.preactivation(x, u_bar))
        J = identity - model.A_x - model.B_sigma @ np.diag(slopes) @ model.A_tilde
        try:
            x_new = x + np.linalg.solve(J, -F)
            res_new = float(np.linalg.norm(residual_vector(x_new)))
            if res_new < res:
                x, res = x_new, res_new
        except np.linalg.LinAlgError:
            pass

    if not np.isfinite(res) or res > tol:
        raise EquilibriumNotFoundError(
            f"No se encontró equilibrio tras {max_iter} iteraciones", res
        )

    logger.debug("Equilibrio encontrado con residuo %.3e", res)

    return Equilibrium(
        x_bar=x,
        u_bar=u_bar,
        y_bar=model.output(x),
        v_bar=model.preactivation(x, u_bar),
        residual=res,
    )


def _polytope_nonempty(G: np.ndarray, b: np.ndarray) -> bool:
    """Verifica por programación lineal que {z : G z <= b} no es vacío"""
    result = linprog(
        c=np.zeros(G.shape[1]), A_ub=G, b_ub=b,
        bounds=[(None, None)] * G.shape[1], method="highs",
    )
    return result.status == 0


@dataclass(frozen=True)
class ConstraintSets:
    """Politopos de entrada/salida y elipsoide de perturbaciones"""
    G_u: np.ndarray
    b_u: np.ndarray
    G_y: np.ndarray
    b_y: np.ndarray
    Q_w0: np.ndarray = field(repr=False)

    def __post_init__(self):
        for name in ('G_u', 'b_u', 'G_y', 'b_y', 'Q_w0'):
            object.__setattr__(self, name, np.array(getattr(self, name), dtype=float))
        self._validate()

    def _validate(self) -> None:
        """Valida dimensiones, simetría/definición positiva y no vacuidad"""
        if self.G_u.ndim != 2 or self.b_u.shape != (self.G_u.shape[0],):
            raise DimensionError("G_u y b_u inconsistentes")
        if self.G_y.ndim != 2 or self.b_y.shape != (self.G_y.shape[0],):
            raise DimensionError("G_y y b_y inconsistentes")
        if self.Q_w0.ndim != 2 or self.Q_w0.shape[0] != self.Q_w0.shape[1]:
            raise DimensionError("Q_w0 debe ser cuadrada")

        if not np.allclose(self.Q_w0, self.Q_w0.T, atol=1e-12):
            raise ValueError("Q_w0 debe ser simétrica")
        try:
            np.linalg.cholesky(self.Q_w0)
        except np.linalg.LinAlgError:
            raise ValueError("Q_w0 debe ser definida positiva")

        if not _polytope_nonempty(self.G_u, self.b_u):
            raise ValueError("El politopo de entrada U es vacío")
        if not _polytope_nonempty(self.G_y, self.b_y):
            raise ValueError("El politopo de salida Y es vacío")

    @property
    def n_t(self) -> int:
        return self.G_u.shape[0]

    @property
    def n_r(self) -> int:
        return self.G_y.shape[0]

    def check_dimensions(self, model: RnnModel) -> None:
        """Verifica la compatibilidad con un modelo"""
        if self.G_u.shape[1] != model.m:
            raise DimensionError(f"G_u tiene {self.G_u.shape[1]} columnas, m={model.m}")
        if self.G_y.shape[1] != model.n_y:
            raise DimensionError(f"G_y tiene {self.G_y.shape[1]} columnas, n_y={model.n_y}")
        if self.Q_w0.shape[0] != model.n:
            raise DimensionError(f"Q_w0 es {self.Q_w0.shape}, n={model.n}")

    def input_residual(self, u: np.ndarray) -> np.ndarray:
        """max(G_u u - b_u) por muestra"""
        return np.max(np.asarray(u, dtype=float) @ self.G_u.T - self.b_u, axis=-1)

    def output_residual(self, y: np.ndarray) -> np.ndarray:
        """max(G_y y - b_y) por muestra"""
        return np.max(np.asarray(y, dtype=float) @ self.G_y.T - self.b_y, axis=-1)

    def input_margin(self, u_bar: np.ndarray) -> np.ndarray:
        """Margen b̄_u = b_u - G_u ū"""
        return self.b_u - self.G_u @ np.asarray(u_bar, dtype=float)

    def validate_equilibrium(self, equilibrium: Equilibrium) -> None:
        """Exige ū y ȳ estrictamente dentro de U e Y"""
        if np.any(self.input_margin(equilibrium.u_bar) <= 0):
            raise InfeasibleEquilibriumError(
                "El equilibrio no está estrictamente dentro del politopo de entrada"
            )
        if np.any(self.b_y - self.G_y @ equilibrium.y_bar <= 0):
            raise InfeasibleEquilibriumError(
                "El equilibrio no está estrictamente dentro del politopo de salida"
            )

    @classmethod
    def from_bounds(cls,
                    u_min: Sequence[float], u_max: Sequence[float],
                    y_min: Sequence[float], y_max: Sequence[float],
                    w_radius: float, n: int) -> "ConstraintSets":
        """
        Construye restricciones tipo caja y una bola de perturbaciones

        Args:
            u_min, u_max: Cotas de la entrada
            y_min, y_max: Cotas de la salida
            w_radius: Radio euclídeo de la perturbación (w ∈ E(I/r²))
            n: Dimensión del estado
        """
        u_min, u_max = np.atleast_1d(np.array(u_min, float)), np.atleast_1d(np.array(u_max, float))
        y_min, y_max = np.atleast_1d(np.array(y_min, float)), np.atleast_1d(np.array(y_max, float))
        m, n_y = len(u_min), len(y_min)

        return cls(
            G_u=np.vstack([np.eye(m), -np.eye(m)]),
            b_u=np.concatenate([u_max, -u_min]),
            G_y=np.vstack([np.eye(n_y), -np.eye(n_y)]),
            b_y=np.concatenate([y_max, -y_min]),
            Q_w0=np.eye(n) / w_radius ** 2,
        )

    def to_dict(self) -> dict:
        return {
            'G_u': self.G_u.tolist(),
            'b_u': self.b_u.tolist(),
            'G_y': self.G_y.tolist(),
            'b_y': self.b_y.tolist(),
            'Q_w0': self.Q_w0.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ConstraintSets":
        return cls(
            G_u=data['G_u'], b_u=data['b_u'],
            G_y=data['G_y'], b_y=data['b_y'],
            Q_w0=data['Q_w0'],
        )
