"""
Síntesis LMI de la ganancia estabilizante
Ensambla las condiciones 6a-6f como un problema de factibilidad
semidefinida y ejecuta el procedimiento de escalamiento en cuatro pasos
"""
import itertools
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import cvxpy as cp
import numpy as np
from pydantic import BaseModel, Field
from scipy.optimize import linprog

from ..exceptions import (
    BoxTooLargeError,
    InfeasibleEquilibriumError,
    LocalityViolationError,
    SolverError,
    SynthesisFailedError,
)
from ..models.ellipsoid import Ellipsoid
from ..models.rnn_model import Activation, ConstraintSets, Equilibrium, RnnModel, get_activation

logger = logging.getLogger(__name__)

CONDITIONS = ("6a", "6b", "6c", "6d", "6e", "6f", "6g")


# ---------------------------------------------------------------------------
# Caja de refuerzo
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BoostBox:
    """Caja simétrica U_b = {u_b : |g_b,i u_b,i| <= 1}"""
    g_b: np.ndarray

    def __post_init__(self):
        g_b = np.atleast_1d(np.array(self.g_b, dtype=float))
        if g_b.ndim != 1 or g_b.size == 0:
            raise ValueError("g_b debe ser un vector no vacío")
        if not np.all(np.isfinite(g_b)) or np.any(g_b <= 0):
            raise ValueError(f"Todas las entradas de g_b deben ser positivas y finitas: {g_b}")
        g_b.setflags(write=False)
        object.__setattr__(self, 'g_b', g_b)

    @classmethod
    def from_bound(cls, bound: Union[float, Sequence[float]], m: int) -> "BoostBox":
        """Caja |u_b,i| <= bound_i"""
        bound = np.broadcast_to(np.asarray(bound, dtype=float), (m,))
        return cls(1.0 / bound)

    @property
    def m(self) -> int:
        return self.g_b.size

    @property
    def G_b(self) -> np.ndarray:
        return np.diag(self.g_b)

    @property
    def half_widths(self) -> np.ndarray:
        return 1.0 / self.g_b

    def contains(self, u_b: np.ndarray, tol: float = 1e-12) -> np.ndarray:
        return np.all(np.abs(np.asarray(u_b) * self.g_b) <= 1.0 + tol, axis=-1)

    def vertices(self) -> np.ndarray:
        """Los 2^m vértices de la caja"""
        signs = np.array(list(itertools.product((-1.0, 1.0), repeat=self.m)))
        return signs * self.half_widths

    def max_over_box(self, row: np.ndarray) -> float:
        """max{g ũ : ũ ∈ U_b} = Σ_j |g_j| / g_b,j"""
        return float(np.sum(np.abs(row) / self.g_b))

    def fits_inside(self, constraints: ConstraintSets, u_bar: np.ndarray) -> bool:
        """Verifica U_b ⊆ U ⊖ ū en los vértices"""
        u = np.asarray(u_bar, dtype=float) + self.vertices()
        return bool(np.all(constraints.input_residual(u) <= 1e-12))

    def scaled(self, factor: float) -> "BoostBox":
        """Multiplica g_b (reduce la caja si factor > 1)"""
        return BoostBox(self.g_b * factor)

    def to_dict(self) -> dict:
        return {'g_b': self.g_b.tolist()}

    @classmethod
    def from_dict(cls, data: dict) -> "BoostBox":
        return cls(data['g_b'])


def init_boost_box(constraints: ConstraintSets,
                   equilibrium: Equilibrium,
                   t_max: float = 1e6) -> BoostBox:
    """
    Paso 1: caja inicial por programación lineal

    max Σ t_j  s.a.  Σ_j |g_u,i,j| t_j <= b̄_u,i,  t_j > 0,  con g_b,j = 1 / t_j

    Args:
        constraints: Conjuntos de restricciones
        equilibrium: Equilibrio de operación
        t_max: Cota superior para canales de entrada no restringidos

    Returns:
        BoostBox inicial
    """
    margin = constraints.input_margin(equilibrium.u_bar)
    if np.any(margin <= 0):
        raise InfeasibleEquilibriumError(
            f"ū no está estrictamente dentro de U: b̄_u = {margin}"
        )

    G_abs = np.abs(constraints.G_u)
    m = G_abs.shape[1]
    t_floor = 1e-6 * float(np.min(margin)) / max(float(G_abs.max()), 1.0)

    result = linprog(
        c=-np.ones(m), A_ub=G_abs, b_ub=margin,
        bounds=[(t_floor, t_max)] * m, method="highs",
    )
    if result.status != 0:
        raise SolverError(f"Falló el programa lineal de la caja inicial: {result.message}")

    t = result.x
    for j in np.flatnonzero(t <= t_floor * (1 + 1e-9)):
        logger.warning("Canal de refuerzo %d en el piso del programa lineal (t=%.3e)", j, t[j])

    logger.info("Caja de refuerzo inicial: g_b = %s", np.array2string(1.0 / t, precision=4))
    return BoostBox(1.0 / t)


# ---------------------------------------------------------------------------
# v̄(h)
# ---------------------------------------------------------------------------

def compute_vbar(activation: Union[str, Activation],
                 h: float,
                 tol: float = 1e-10,
                 v_cap: float = 1e12) -> float:
    """
    Semiancho v̄(h) = sup{ṽ : 1 - σ'(v) <= 1/h para todo |v| <= ṽ}

    Usa bisección sobre |v| aprovechando que 1 - σ' es par y no decreciente
    en |v|.

    Args:
        activation: Descriptor o etiqueta
        h: Escala h >= 1
        tol: Tolerancia absoluta de la bisección

    Returns:
        v̄ (float('inf') si la cota vale globalmente)
    """
    if not h >= 1.0:
        raise ValueError(f"h debe ser >= 1, recibido {h}")

    act = get_activation(activation)
    level = 1.0 / h

    # 1 - σ' < 1 en todo punto
    if level >= 1.0:
        return float('inf')

    lo, hi = 0.0, 1.0
    while act.q_derivative(hi) <= level:
        lo, hi = hi, 2.0 * hi
        if hi > v_cap:
            return float('inf')

    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if act.q_derivative(mid) <= level:
            lo = mid
        else:
            hi = mid

    return 0.5 * (lo + hi)


# ---------------------------------------------------------------------------
# Problema cónico
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class VariableBlock:
    """Bloque de decisión con banderas de simetría"""
    name: str
    shape: Tuple[int, int]
    symmetric: bool = False
    diagonal: bool = False

    @property
    def size(self) -> int:
        return self.shape[0] * self.shape[1]


@dataclass(frozen=True)
class AffineTerm:
    """Término L · V · R (o L · Vᵀ · R si transpose)"""
    variable: str
    left: np.ndarray
    right: np.ndarray
    transpose: bool = False


class AffineMatrix:
    """Matriz afín en las variables: C + Σ L V R"""

    __array_ufunc__ = None

    def __init__(self, constant: np.ndarray, terms: Sequence[AffineTerm] = ()):
        self.constant = np.atleast_2d(np.array(constant, dtype=float))
        self.terms: Tuple[AffineTerm, ...] = tuple(
            t for t in terms if t.left.size and t.right.size
        )

    @classmethod
    def variable(cls, block: VariableBlock) -> "AffineMatrix":
        rows, cols = block.shape
        return cls(np.zeros((rows, cols)), (AffineTerm(block.name, np.eye(rows), np.eye(cols)),))

    @classmethod
    def zeros(cls, rows: int, cols: int) -> "AffineMatrix":
        return cls(np.zeros((rows, cols)))

    @property
    def shape(self) -> Tuple[int, int]:
        return self.constant.shape

    @property
    def T(self) -> "AffineMatrix":
        return AffineMatrix(
            self.constant.T,
            [AffineTerm(t.variable, t.right.T, t.left.T, not t.transpose) for t in self.terms],
        )

    def _coerce(self, other) -> "AffineMatrix":
        return other if isinstance(other, AffineMatrix) else AffineMatrix(other)

    def __add__(self, other) -> "AffineMatrix":
        other = self._coerce(other)
        return AffineMatrix(self.constant + other.constant, self.terms + other.terms)

    __radd__ = __add__

    def __neg__(self) -> "AffineMatrix":
        return self * -1.0

    def __sub__(self, other) -> "AffineMatrix":
        return self + (-self._coerce(other))

    def __rsub__(self, other) -> "AffineMatrix":
        return self._coerce(other) + (-self)

    def __mul__(self, scalar: float) -> "AffineMatrix":
        scalar = float(scalar)
        return AffineMatrix(
            scalar * self.constant,
            [AffineTerm(t.variable, scalar * t.left, t.right, t.transpose) for t in self.terms],
        )

    __rmul__ = __mul__

    def __truediv__(self, scalar: float) -> "AffineMatrix":
        return self * (1.0 / float(scalar))

    def __matmul__(self, right: np.ndarray) -> "AffineMatrix":
        right = np.atleast_2d(np.asarray(right, dtype=float))
        return AffineMatrix(
            self.constant @ right,
            [AffineTerm(t.variable, t.left, t.right @ right, t.transpose) for t in self.terms],
        )

    def __rmatmul__(self, left: np.ndarray) -> "AffineMatrix":
        left = np.atleast_2d(np.asarray(left, dtype=float))
        return AffineMatrix(
            left @ self.constant,
            [AffineTerm(t.variable, left @ t.left, t.right, t.transpose) for t in self.terms],
        )

    def variables(self) -> List[str]:
        return sorted({t.variable for t in self.terms})

    def evaluate(self, assignment: Mapping[str, np.ndarray]) -> np.ndarray:
        """Valor numérico para una asignación de las variables"""
        value = self.constant.copy()
        for t in self.terms:
            V = np.asarray(assignment[t.variable], dtype=float)
            value += t.left @ (V.T if t.transpose else V) @ t.right
        return value


def block_matrix(sizes: Sequence[int],
                 blocks: Mapping[Tuple[int, int], Union[AffineMatrix, np.ndarray]]) -> AffineMatrix:
    """
    Matriz simétrica por bloques a partir de su triángulo superior

    Args:
        sizes: Tamaño de cada fila/columna de bloques (se admiten ceros)
        blocks: {(i, j): bloque} con i <= j; los bloques ausentes son cero

    Returns:
        AffineMatrix simétrica de dimensión Σ sizes
    """
    offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(int)
    total = int(offsets[-1])
    selectors = [np.eye(total)[:, offsets[i]:offsets[i + 1]] for i in range(len(sizes))]

    result = AffineMatrix.zeros(total, total)
    for (i, j), block in blocks.items():
        if i > j:
            raise ValueError(f"Solo se aceptan bloques del triángulo superior, recibido ({i}, {j})")
        block = block if isinstance(block, AffineMatrix) else AffineMatrix(block)
        if block.shape != (sizes[i], sizes[j]):
            raise ValueError(
                f"Bloque ({i}, {j}) de forma {block.shape}, se esperaba ({sizes[i]}, {sizes[j]})"
            )
        if sizes[i] == 0 or sizes[j] == 0:
            continue

        lifted = selectors[i] @ block @ selectors[j].T
        result = result + lifted
        if i != j:
            result = result + lifted.T

    return result


@dataclass(frozen=True)
class PsdConstraint:
    """Restricción etiquetada M ⪰ 0"""
    label: str
    matrix: AffineMatrix

    @property
    def condition(self) -> str:
        return self.label.split('[')[0]


@dataclass(frozen=True)
class ScalarConstraint:
    """Restricción escalar expr >= lower"""
    label: str
    expression: AffineMatrix
    lower: float = 0.0


@dataclass(frozen=True)
class ConicProblem:
    """Problema de factibilidad semidefinida"""
    variables: Tuple[VariableBlock, ...]
    psd: Tuple[PsdConstraint, ...]
    scalars: Tuple[ScalarConstraint, ...] = ()
    metadata: Dict[str, object] = field(default_factory=dict, compare=False)

    def __post_init__(self):
        declared = {v.name: v for v in self.variables}
        if len(declared) != len(self.variables):
            raise ValueError("Nombres de variables repetidos")

        for constraint in self.psd + self.scalars:
            matrix = constraint.matrix if isinstance(constraint, PsdConstraint) else constraint.expression
            for term in matrix.terms:
                if term.variable not in declared:
                    raise ValueError(
                        f"La restricción {constraint.label} usa la variable no declarada {term.variable}"
                    )
            if isinstance(constraint, PsdConstraint) and matrix.shape[0] != matrix.shape[1]:
                raise ValueError(f"La restricción {constraint.label} no es cuadrada")

    def block(self, name: str) -> VariableBlock:
        for v in self.variables:
            if v.name == name:
                return v
        raise KeyError(name)

    def count(self, condition: str) -> int:
        """Número de bloques PSD de una condición ("6d", "6e", ...)"""
        return sum(1 for c in self.psd if c.condition == condition)

    def residuals(self, assignment: Mapping[str, np.ndarray]) -> Dict[str, float]:
        """Mínimo autovalor de cada bloque PSD y holgura de cada restricción escalar"""
        margins: Dict[str, float] = {}
        for c in self.psd:
            M = c.matrix.evaluate(assignment)
            margins[c.label] = float(np.linalg.eigvalsh((M + M.T) / 2.0).min()) if M.size else 0.0
        for c in self.scalars:
            margins[c.label] = float(c.expression.evaluate(assignment)[0, 0] - c.lower)
        return margins


@dataclass
class FeasibilityReport:
    """Resultado de un intento de factibilidad"""
    status: str  # "feasible" | "infeasible" | "error"
    assignment: Optional[Dict[str, np.ndarray]] = None
    residuals: Dict[str, float] = field(default_factory=dict)
    message: str = ""

    @property
    def feasible(self) -> bool:
        return self.status == "feasible"

    def to_dict(self) -> dict:
        return {
            'status': self.status,
            'residuals': dict(self.residuals),
            'message': self.message,
        }


class CvxpyBackend:
    """
    Backend semidefinido sobre cvxpy

    Cada bloque se simetriza y se exige (M + Mᵀ)/2 ⪰ margin·I, de modo que
    los residuos medidos queden por encima de la tolerancia del contrato.
    """

    def __init__(self,
                 solver: str = "CLARABEL",
                 margin: float = 1e-6,
                 tolerance: float = 1e-7,
                 verbose: bool = False,
                 solver_options: Optional[dict] = None):
        self.solver = solver.upper()
        self.margin = margin
        self.tolerance = tolerance
        self.verbose = verbose
        self.solver_options = solver_options or {}

    def _variables(self, problem: ConicProblem) -> Dict[str, Tuple[cp.Variable, cp.Expression]]:
        variables = {}
        for block in problem.variables:
            if block.size == 0:
                continue
            if block.diagonal:
                var = cp.Variable(block.shape[0], name=block.name)
                variables[block.name] = (var, cp.diag(var))
            elif block.symmetric:
                var = cp.Variable(block.shape, symmetric=True, name=block.name)
                variables[block.name] = (var, var)
            else:
                var = cp.Variable(block.shape, name=block.name)
                variables[block.name] = (var, var)
        return variables

    @staticmethod
    def _expression(matrix: AffineMatrix, variables) -> cp.Expression:
        expr = cp.Constant(matrix.constant)
        for t in matrix.terms:
            if t.variable not in variables:
                continue
            V = variables[t.variable][1]
            expr = expr + cp.Constant(t.left) @ (V.T if t.transpose else V) @ cp.Constant(t.right)
        return expr

    def solve(self, problem: ConicProblem) -> FeasibilityReport:
        variables = self._variables(problem)

        constraints = []
        for c in problem.psd:
            n = c.matrix.shape[0]
            if n == 0:
                continue
            expr = self._expression(c.matrix, variables)
            constraints.append((expr + expr.T) / 2 >> self.margin * np.eye(n))
        for c in problem.scalars:
            constraints.append(self._expression(c.expression, variables)[0, 0] >= c.lower)

        cvx_problem = cp.Problem(cp.Minimize(0), constraints)
        try:
            cvx_problem.solve(solver=self.solver, verbose=self.verbose, **self.solver_options)
        except cp.error.SolverError as exc:
            logger.debug("Fallo numérico del solver %s: %s", self.solver, exc)
            return FeasibilityReport(status="error", message=str(exc))

        status = cvx_problem.status
        logger.debug("Estado del solver %s: %s", self.solver, status)

        if status in (cp.INFEASIBLE, cp.INFEASIBLE_INACCURATE):
            return FeasibilityReport(status="infeasible", message=status)
        if status not in (cp.OPTIMAL, cp.OPTIMAL_INACCURATE):
            return FeasibilityReport(status="error", message=str(status))

        assignment = {}
        for block in problem.variables:
            if block.size == 0:
                assignment[block.name] = np.zeros(block.shape)
                continue
            var = variables[block.name][0]
            value = np.asarray(var.value, dtype=float)
            if block.diagonal:
                value = np.diag(value)
            elif block.symmetric:
                value = (value + value.T) / 2.0
            assignment[block.name] = value.reshape(block.shape)

        residuals = problem.residuals(assignment)
        worst = min(residuals.values()) if residuals else 0.0
        if worst < -self.tolerance:
            return FeasibilityReport(
                status="infeasible", assignment=assignment, residuals=residuals,
                message=f"Residuo mínimo {worst:.3e} por debajo de la tolerancia",
            )

        return FeasibilityReport(status="feasible", assignment=assignment, residuals=residuals,
                                 message=str(status))


def solve_feasibility(problem: ConicProblem,
                      backend: Optional[CvxpyBackend] = None) -> FeasibilityReport:
    """
    Resuelve un problema de factibilidad con el backend indicado

    Returns:
        FeasibilityReport con asignación y residuos, o con estado infactible/error
    """
    backend = backend or CvxpyBackend()
    return backend.solve(problem)


# ---------------------------------------------------------------------------
# Ensamblaje de 6a-6f
# ---------------------------------------------------------------------------

def index_set(H_s: np.ndarray, threshold: float = 1.0) -> List[int]:
    """I(H_s) = {i : h_i > threshold}"""
    return [int(i) for i in np.flatnonzero(np.asarray(H_s, dtype=float) > threshold)]


def boost_disturbance_shape(constraints: ConstraintSets, box: BoostBox) -> np.ndarray:
    """Q_ws^0 = diag(Q_w^0 / 2, G_bᵀ G_b / (2m))"""
    n, m = constraints.Q_w0.shape[0], box.m
    Q_ws0 = np.zeros((n + m, n + m))
    Q_ws0[:n, :n] = constraints.Q_w0 / 2.0
    Q_ws0[n:, n:] = box.G_b.T @ box.G_b / (2.0 * m)
    return Q_ws0


def assemble_lmis(model: RnnModel,
                  equilibrium: Equilibrium,
                  constraints: ConstraintSets,
                  boost_box: BoostBox,
                  H_s: np.ndarray,
                  gamma_s: float,
                  index_threshold: float = 1.0,
                  positivity: float = 1e-6) -> ConicProblem:
    """
    Ensambla las condiciones 6a-6f

    Variables: Q_s, Z, Qtilde_sx, Q_sws y U_s (diagonal).

    Args:
        model: Planta RNN
        equilibrium: Equilibrio
        constraints: Restricciones
        boost_box: Caja de refuerzo actual
        H_s: Diagonal de H_s (ν,)
        gamma_s: Escala del conjunto invariante
        index_threshold: Umbral de I(H_s)
        positivity: Cota inferior para Q_s y U_s

    Returns:
        ConicProblem con bloques etiquetados "6a", "6b", "6c", "6d[i]", "6e[r]", "6f[t]"
    """
    n, m, nu = model.n, model.m, model.nu
    H_s = np.asarray(H_s, dtype=float).reshape(nu)
    if np.any(H_s < 1.0):
        raise ValueError("H_s debe cumplir H_s ⪰ I")
    if gamma_s <= 0:
        raise ValueError("gamma_s debe ser positivo")
    constraints.check_dimensions(model)
    if boost_box.m != m:
        raise ValueError(f"La caja de refuerzo tiene dimensión {boost_box.m}, m={m}")

    Qb = VariableBlock("Q_s", (n, n), symmetric=True)
    Zb = VariableBlock("Z", (m, n))
    Qtb = VariableBlock("Qtilde_sx", (n, n), symmetric=True)
    Qwsb = VariableBlock("Q_sws", (n + m, n + m), symmetric=True)
    Ub = VariableBlock("U_s", (nu, nu), diagonal=True)

    Q = AffineMatrix.variable(Qb)
    Z = AffineMatrix.variable(Zb)
    Qt = AffineMatrix.variable(Qtb)
    Qws = AffineMatrix.variable(Qwsb)
    U = AffineMatrix.variable(Ub)

    D_s = np.hstack([np.eye(n), model.B])
    D_tilde = np.hstack([np.zeros((nu, n)), model.B_tilde])
    Q_ws0 = boost_disturbance_shape(constraints, boost_box)

    closed_loop = model.A @ Q + model.B @ Z
    preact = model.A_tilde @ Q + model.B_tilde @ Z

    psd = [
        PsdConstraint("6a", block_matrix(
            (n, nu, n + m, n),
            {
                (0, 0): Q - Qt,
                (0, 1): -preact.T,
                (0, 3): closed_loop.T,
                (1, 1): np.diag(2.0 * H_s) @ U,
                (1, 2): -D_tilde,
                (1, 3): U @ model.B_q.T,
                (2, 2): Qws,
                (2, 3): D_s.T,
                (3, 3): Q,
            },
        )),
        PsdConstraint("6b", Q_ws0 - Qws),
        PsdConstraint("6c", Qt - Q / gamma_s),
    ]

    # 6d: un bloque por canal regional con v̄ finito
    v_eq = np.abs(equilibrium.v_bar)
    vbar = np.full(nu, np.inf)
    for i in index_set(H_s, index_threshold):
        vbar[i] = compute_vbar(model.activations[i], H_s[i])
        if not np.isfinite(vbar[i]):
            continue
        if vbar[i] < v_eq[i]:
            raise LocalityViolationError(i, vbar[i], v_eq[i])

        e_i = np.eye(nu)[i:i + 1]
        psd.append(PsdConstraint(f"6d[{i}]", block_matrix(
            (n, n + m, 1),
            {
                (0, 0): Q / (2.0 * gamma_s),
                (0, 2): (e_i @ preact).T,
                (1, 1): Q_ws0 / 2.0,
                (1, 2): D_tilde[i:i + 1].T,
                (2, 2): np.array([[(vbar[i] - v_eq[i]) ** 2]]),
            },
        )))

    # 6e: filas del politopo de salida
    output_margin = constraints.b_y - constraints.G_y @ model.C @ equilibrium.x_bar
    for r in range(constraints.n_r):
        row = constraints.G_y[r:r + 1] @ model.C
        psd.append(PsdConstraint(f"6e[{r}]", block_matrix(
            (n, 1),
            {
                (0, 0): Q / gamma_s,
                (0, 1): Q @ row.T,
                (1, 1): np.array([[output_margin[r] ** 2]]),
            },
        )))

    # 6f: filas del politopo de entrada, reservando el peor caso de la caja
    input_margin = constraints.input_margin(equilibrium.u_bar)
    for t in range(constraints.n_t):
        g_row = constraints.G_u[t:t + 1]
        margin = float(input_margin[t]) - boost_box.max_over_box(g_row)
        if margin <= 0:
            raise BoxTooLargeError(t, margin)
        psd.append(PsdConstraint(f"6f[{t}]", block_matrix(
            (n, 1),
            {
                (0, 0): Q / gamma_s,
                (0, 1): Z.T @ g_row.T,
                (1, 1): np.array([[margin ** 2]]),
            },
        )))

    psd.append(PsdConstraint("Q_s", Q - positivity * np.eye(n)))

    scalars = [
        ScalarConstraint(f"U_s[{i}]", np.eye(nu)[i:i + 1] @ U @ np.eye(nu)[:, i:i + 1], positivity)
        for i in range(nu)
    ]

    return ConicProblem(
        variables=(Qb, Zb, Qtb, Qwsb, Ub),
        psd=tuple(psd),
        scalars=tuple(scalars),
        metadata={'vbar': vbar, 'gamma_s': gamma_s, 'H_s': H_s.copy()},
    )


# ---------------------------------------------------------------------------
# Procedimiento de síntesis
# ---------------------------------------------------------------------------

class SynthesisOptions(BaseModel):
    """Opciones del procedimiento de síntesis"""
    index_threshold: float = Field(1.0, ge=0.0, description="I(H_s) = {i : h_i > umbral}")
    gamma_init: float = Field(1.0, gt=0.0, description="γ_s inicial")
    h_init: float = Field(1.0, ge=1.0, description="h inicial")
    escalation_factor: float = Field(2.0, gt=1.0, description="Factor geométrico de h y γ_s")
    max_rounds: int = Field(20, ge=1, description="Rondas de escalamiento")
    box_multiplier: float = Field(2.0, gt=1.0, description="Multiplicador de g_b en cada reinicio")
    max_restarts: int = Field(5, ge=0, description="Reinicios con caja reducida")
    boost_bound: Optional[List[float]] = Field(
        None, description="Cota |u_b,i| elegida por el diseñador; None usa el programa lineal"
    )
    solver: str = Field("CLARABEL", description="Solver semidefinido de cvxpy")
    psd_margin: float = Field(1e-6, gt=0.0, description="Margen estricto en cada bloque PSD")
    psd_tolerance: float = Field(1e-7, gt=0.0, description="Tolerancia de los residuos")


@dataclass
class SynthesisResult:
    """Ganancia, certificados y residuos de la síntesis"""
    K: np.ndarray
    P_s: np.ndarray
    Q_s: np.ndarray
    Z: np.ndarray
    gamma_s: float
    H_s: np.ndarray
    U_s: np.ndarray
    Qtilde_sx: np.ndarray
    Q_sws: np.ndarray
    residuals: Dict[str, float]
    boost_box: BoostBox
    global_flag: bool
    vbar: np.ndarray
    index_threshold: float = 1.0
    rounds: int = 0
    restarts: int = 0

    @property
    def n(self) -> int:
        return self.K.shape[1]

    @property
    def m(self) -> int:
        return self.K.shape[0]

    def rpi_set(self, equilibrium: Optional[Equilibrium] = None) -> Ellipsoid:
        """E(P_s / γ_s) ⊕ x̄ (centrado en el origen si no se da equilibrio)"""
        center = np.zeros(self.n) if equilibrium is None else equilibrium.x_bar
        return Ellipsoid(self.P_s / self.gamma_s, center)

    def to_dict(self) -> dict:
        def encode(value: float):
            return None if not np.isfinite(value) else float(value)

        return {
            'K': self.K.tolist(),
            'P_s': self.P_s.tolist(),
            'Q_s': self.Q_s.tolist(),
            'Z': self.Z.tolist(),
            'gamma_s': float(self.gamma_s),
            'H_s': self.H_s.tolist(),
            'U_s': self.U_s.tolist(),
            'Qtilde_sx': self.Qtilde_sx.tolist(),
            'Q_sws': self.Q_sws.tolist(),
            'residuals': {k: encode(v) for k, v in self.residuals.items()},
            'boost_box': self.boost_box.to_dict(),
            'global_flag': bool(self.global_flag),
            'vbar': [encode(v) for v in self.vbar],
            'index_threshold': float(self.index_threshold),
            'rounds': int(self.rounds),
            'restarts': int(self.restarts),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SynthesisResult":
        def decode(value):
            return float('inf') if value is None else float(value)

        n = len(data['P_s'])
        m = len(data['boost_box']['g_b'])
        return cls(
            K=np.array(data['K'], dtype=float).reshape(m, n),
            P_s=np.array(data['P_s'], dtype=float),
            Q_s=np.array(data['Q_s'], dtype=float),
            Z=np.array(data['Z'], dtype=float).reshape(m, n),
            gamma_s=float(data['gamma_s']),
            H_s=np.array(data['H_s'], dtype=float),
            U_s=np.array(data['U_s'], dtype=float),
            Qtilde_sx=np.array(data['Qtilde_sx'], dtype=float),
            Q_sws=np.array(data['Q_sws'], dtype=float),
            residuals={k: decode(v) for k, v in data['residuals'].items()},
            boost_box=BoostBox.from_dict(data['boost_box']),
            global_flag=bool(data['global_flag']),
            vbar=np.array([decode(v) for v in data['vbar']], dtype=float),
            index_threshold=float(data.get('index_threshold', 1.0)),
            rounds=int(data.get('rounds', 0)),
            restarts=int(data.get('restarts', 0)),
        )


def _condition_residuals(report: FeasibilityReport) -> Dict[str, float]:
    """Agrega residuos por condición (mínimo sobre los bloques)"""
    aggregated: Dict[str, float] = {}
    for label, value in report.residuals.items():
        key = label.split('[')[0]
        if key in CONDITIONS:
            aggregated[key] = min(aggregated.get(key, np.inf), value)
    return aggregated


def locality_margin(model: RnnModel, equilibrium: Equilibrium,
                    H_s: np.ndarray, threshold: float = 1.0) -> float:
    """6g: min_i v̄_i(h_i) - |v̄_eq,i| sobre I(H_s); +∞ si I(H_s) es vacío"""
    margins = [
        compute_vbar(model.activations[i], H_s[i]) - abs(equilibrium.v_bar[i])
        for i in index_set(H_s, threshold)
    ]
    return float(min(margins)) if margins else float('inf')


def _can_escalate_h(model: RnnModel, equilibrium: Equilibrium,
                    H_candidate: np.ndarray, threshold: float) -> bool:
    return locality_margin(model, equilibrium, H_candidate, threshold) >= 0.0


def _build_result(report: FeasibilityReport, box: BoostBox, H_s: np.ndarray,
                  gamma_s: float, vbar: np.ndarray, locality: float,
                  options: SynthesisOptions, rounds: int, restarts: int) -> SynthesisResult:
    a = report.assignment
    Q_s = (a["Q_s"] + a["Q_s"].T) / 2.0
    Z = a["Z"]
    K = np.linalg.solve(Q_s, Z.T).T
    P_s = np.linalg.inv(Q_s)
    P_s = (P_s + P_s.T) / 2.0

    residuals = _condition_residuals(report)
    residuals["6g"] = locality

    return SynthesisResult(
        K=K, P_s=P_s, Q_s=Q_s, Z=Z, gamma_s=float(gamma_s),
        H_s=np.asarray(H_s, dtype=float).copy(), U_s=np.diag(a["U_s"]).copy(),
        Qtilde_sx=a["Qtilde_sx"], Q_sws=a["Q_sws"], residuals=residuals,
        boost_box=box, global_flag=not index_set(H_s, options.index_threshold),
        vbar=vbar, index_threshold=options.index_threshold,
        rounds=rounds, restarts=restarts,
    )


def synthesize(model: RnnModel,
               equilibrium: Equilibrium,
               constraints: ConstraintSets,
               options: Optional[SynthesisOptions] = None,
               backend: Optional[CvxpyBackend] = None) -> SynthesisResult:
    """
    Procedimiento de síntesis en cuatro pasos

    1. Caja de refuerzo inicial (programa lineal o cota del diseñador).
    2. H_s = h_init·I, γ_s = gamma_init.
    3. Escalamiento alternado de γ_s y H_s hasta encontrar factibilidad.
       H_s solo se duplica si el valor duplicado sigue cumpliendo 6g.
    4. Verificación de 6g; si falla, o si la caja es demasiado grande
       o se agota el escalamiento, se reinicia con g_b multiplicado.

    Returns:
        SynthesisResult con K = Z Q_s⁻¹ y P_s = Q_s⁻¹
    """
    options = options or SynthesisOptions()
    backend = backend or CvxpyBackend(
        solver=options.solver, margin=options.psd_margin, tolerance=options.psd_tolerance
    )
    constraints.check_dimensions(model)
    constraints.validate_equilibrium(equilibrium)

    # Paso 1
    if options.boost_bound is not None:
        box = BoostBox.from_bound(options.boost_bound, model.m)
        if not box.fits_inside(constraints, equilibrium.u_bar):
            logger.warning("La caja de refuerzo del diseñador excede U ⊖ ū")
    else:
        box = init_boost_box(constraints, equilibrium)

    last_report: Optional[FeasibilityReport] = None

    for restart in range(options.max_restarts + 1):
        # Paso 2
        H_s = np.full(model.nu, options.h_init)
        gamma_s = options.gamma_init
        escalate_gamma = True

        for round_index in range(options.max_rounds):
            try:
                problem = assemble_lmis(
                    model, equilibrium, constraints, box, H_s, gamma_s,
                    index_threshold=options.index_threshold,
                )
            except BoxTooLargeError as exc:
                logger.info("Reinicio %d: %s", restart, exc)
                last_report = FeasibilityReport(status="infeasible", message=str(exc))
                break
            except LocalityViolationError as exc:
                logger.info("Reinicio %d: %s", restart, exc)
                last_report = FeasibilityReport(status="infeasible", message=str(exc))
                break

            report = solve_feasibility(problem, backend)
            last_report = report
            logger.info(
                "Ronda %d (reinicio %d): γ_s=%.4g, max h=%.4g -> %s",
                round_index, restart, gamma_s, float(H_s.max()) if H_s.size else 1.0, report.status,
            )

            if report.feasible:
                # Paso 4
                locality = locality_margin(model, equilibrium, H_s, options.index_threshold)
                if locality < 0:
                    logger.info("6g no se cumple (margen %.3e)", locality)
                    break
                result = _build_result(
                    report, box, H_s, gamma_s, problem.metadata['vbar'], locality,
                    options, round_index, restart,
                )
                logger.info(
                    "Síntesis factible: γ_s=%.4g, global=%s, reinicios=%d",
                    gamma_s, result.global_flag, restart,
                )
                return result

            # Paso 3
            H_candidate = H_s * options.escalation_factor
            if escalate_gamma or model.nu == 0 or not _can_escalate_h(
                    model, equilibrium, H_candidate, options.index_threshold):
                gamma_s *= options.escalation_factor
            else:
                H_s = H_candidate
            escalate_gamma = not escalate_gamma

        box = box.scaled(options.box_multiplier)
        logger.info("Reinicio: g_b aumentado a %s", np.array2string(box.g_b, precision=4))

    raise SynthesisFailedError(
        "Síntesis fallida: se agotó el esquema de escalamiento", report=last_report
    )
