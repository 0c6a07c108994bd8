"""
Control por modelo interno con refuerzo proyectado
Reconstrucción exacta de la señal exógena, proyección sobre la caja de
refuerzo, ley de control compuesta y simulación de lazo cerrado
"""
import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Deque, List, Optional, Protocol, Tuple

import numpy as np
from scipy.optimize import lsq_linear

from ..exceptions import DimensionError, RpiViolationError
from ..models.rnn_model import Equilibrium, RnnModel
from ..models.stable_operator import OperatorRunner, StableOperator
from ..models.trajectory import Trajectory
from .lmi_synthesis import BoostBox, SynthesisResult

logger = logging.getLogger(__name__)


class BoostOperator(Protocol):
    """Operador causal que consume w_e(k) y produce ũ_b(k)"""

    def reset(self) -> None: ...

    def __call__(self, we_k: np.ndarray) -> np.ndarray: ...


class ZeroOperator:
    """Operador nulo (u_b ≡ 0)"""

    def __init__(self, m: int):
        self.m = m

    def reset(self) -> None:
        pass

    def __call__(self, we_k: np.ndarray) -> np.ndarray:
        return np.zeros(self.m)


class ReplayOperator:
    """
    Reproduce -K Ψ^Δx(k) + Ψ^Δu(k) de un par de lazo cerrado registrado

    Si se entrega la secuencia w_e registrada, compara cada muestra recibida
    con ella y guarda la mayor discrepancia en `max_we_mismatch`.
    """

    def __init__(self, K: np.ndarray, dx: np.ndarray, du: np.ndarray,
                 we: Optional[np.ndarray] = None):
        self.K = np.asarray(K, dtype=float)
        self.outputs = np.asarray(du, dtype=float) - np.asarray(dx, dtype=float) @ self.K.T
        self.we = None if we is None else np.asarray(we, dtype=float)
        self.reset()

    def reset(self) -> None:
        self._k = 0
        self.max_we_mismatch = 0.0

    def __call__(self, we_k: np.ndarray) -> np.ndarray:
        if self._k >= self.outputs.shape[0]:
            raise IndexError("La secuencia registrada se agotó")
        if self.we is not None:
            self.max_we_mismatch = max(
                self.max_we_mismatch, float(np.abs(np.asarray(we_k) - self.we[self._k]).max())
            )
        out = self.outputs[self._k]
        self._k += 1
        return out


@dataclass
class ImcState:
    """Estado del modelo interno: copia de la planta, equilibrio, K y el paso previo"""
    model: RnnModel
    equilibrium: Equilibrium
    K: np.ndarray
    history_length: Optional[int] = None
    prev_dx: Optional[np.ndarray] = None
    prev_du: Optional[np.ndarray] = None
    history: Deque[np.ndarray] = field(default_factory=deque)

    def __post_init__(self):
        self.K = np.asarray(self.K, dtype=float)
        if self.K.shape != (self.model.m, self.model.n):
            raise DimensionError(f"K de forma {self.K.shape}, se esperaba {(self.model.m, self.model.n)}")
        self.history = deque(maxlen=self.history_length)

    @property
    def started(self) -> bool:
        return self.prev_dx is not None

    def reset(self) -> None:
        self.prev_dx = None
        self.prev_du = None
        self.history.clear()

    def record(self, dx: np.ndarray, du: np.ndarray) -> None:
        self.prev_dx = np.asarray(dx, dtype=float).copy()
        self.prev_du = np.asarray(du, dtype=float).copy()


def reconstruct_we(state: ImcState, dx_now: np.ndarray) -> np.ndarray:
    """
    Señal exógena reconstruida

    Δx(0) en k = 0; Δx(k) - f_e(Δx(k-1), Δu(k-1)) en adelante. Con modelo
    perfecto coincide con w(k-1).
    """
    dx_now = np.asarray(dx_now, dtype=float)
    if not state.started:
        we = dx_now.copy()
    else:
        we = dx_now - state.model.error_step(state.equilibrium, state.prev_dx, state.prev_du)
    state.history.append(we)
    return we


def project_box(u_tilde: np.ndarray, box: BoostBox) -> np.ndarray:
    """Proyección euclídea sobre U_b: G_b⁻¹ clip(G_b ũ, -1, 1)"""
    return np.clip(np.asarray(u_tilde, dtype=float) * box.g_b, -1.0, 1.0) / box.g_b


def project_box_qp(u_tilde: np.ndarray, box: BoostBox) -> np.ndarray:
    """Proyección por mínimos cuadrados acotados (oráculo de referencia)"""
    u_tilde = np.asarray(u_tilde, dtype=float)
    half = box.half_widths
    solution = lsq_linear(
        np.eye(box.m), u_tilde, bounds=(-half, half), method='bvls', tol=1e-14
    )
    return solution.x


def boost_input(state: ImcState, dx_now: np.ndarray,
                operator_output: np.ndarray, box: BoostBox) -> np.ndarray:
    """u_b = Π(ũ_b); siempre pertenece a U_b"""
    return project_box(operator_output, box)


def composite_input(K: np.ndarray, dx_now: np.ndarray,
                    u_b: np.ndarray, u_bar: np.ndarray) -> np.ndarray:
    """u = ū + K Δx + u_b"""
    return np.asarray(u_bar, dtype=float) + np.asarray(K, dtype=float) @ np.asarray(dx_now, dtype=float) + u_b


def mismatch_gain_budget(gamma_delta: float, gamma_fe: float) -> float:
    """
    Cota estricta (γ_Δ (γ_fe + 1))⁻¹ sobre γ(M) bajo error de modelo

    Returns:
        +∞ si gamma_delta = 0
    """
    if gamma_delta < 0 or gamma_fe < 0:
        raise ValueError("Las ganancias deben ser no negativas")
    if gamma_delta == 0:
        return float('inf')
    return 1.0 / (gamma_delta * (gamma_fe + 1.0))


def satisfies_mismatch_budget(gain: float, gamma_delta: float, gamma_fe: float) -> bool:
    """γ(M) < (γ_Δ (γ_fe + 1))⁻¹"""
    return gain < mismatch_gain_budget(gamma_delta, gamma_fe)


@dataclass
class ControlStep:
    """Salida de un paso del controlador"""
    u: np.ndarray
    u_b: np.ndarray
    u_tilde_b: np.ndarray
    w_e: np.ndarray


class ImcController:
    """
    Controlador compuesto u = ū + K Δx + Π(M(w_e))

    Se niega a arrancar si Δx(0) no pertenece a E(P_s/γ_s).
    """

    def __init__(self,
                 model: RnnModel,
                 equilibrium: Equilibrium,
                 result: SynthesisResult,
                 operator: Optional[BoostOperator] = None,
                 history_length: Optional[int] = None,
                 rpi_tolerance: float = 1e-9):
        self.result = result
        self.box = result.boost_box
        self.state = ImcState(model, equilibrium, result.K, history_length=history_length)
        self.operator: BoostOperator = operator if operator is not None else ZeroOperator(model.m)
        self.rpi_tolerance = rpi_tolerance
        self._rpi = result.rpi_set()

    @property
    def equilibrium(self) -> Equilibrium:
        return self.state.equilibrium

    def start(self, x0: np.ndarray) -> None:
        dx0 = np.asarray(x0, dtype=float) - self.equilibrium.x_bar
        level = float(self._rpi.level(dx0))
        if level > 1.0 + self.rpi_tolerance:
            raise RpiViolationError(
                f"Δx(0) fuera del conjunto RPI: Δx(0)ᵀ P_s Δx(0) / γ_s = {level:.6g} > 1"
            )
        self.state.reset()
        self.operator.reset()

    def control(self, x: np.ndarray) -> ControlStep:
        """Calcula la entrada para el estado medido x(k)"""
        dx = np.asarray(x, dtype=float) - self.equilibrium.x_bar
        we = reconstruct_we(self.state, dx)
        u_tilde = np.asarray(self.operator(we), dtype=float)
        u_b = boost_input(self.state, dx, u_tilde, self.box)

        du = self.state.K @ dx + u_b
        u = self.equilibrium.u_bar + du
        self.state.record(dx, du)
        return ControlStep(u=u, u_b=u_b, u_tilde_b=u_tilde, w_e=we)


def simulate_closed_loop(model: RnnModel,
                         equilibrium: Equilibrium,
                         result: SynthesisResult,
                         x0: np.ndarray,
                         w: np.ndarray,
                         operator: Optional[BoostOperator] = None,
                         plant: Optional[RnnModel] = None) -> Trajectory:
    """
    Simula el lazo cerrado con el controlador IMC

    Args:
        model: Modelo interno
        equilibrium: Equilibrio
        result: Resultado de la síntesis
        x0: Estado inicial
        w: Perturbaciones (T, n)
        operator: Operador de refuerzo (por defecto nulo)
        plant: Planta real si difiere del modelo interno

    Returns:
        Trajectory de horizonte T
    """
    plant = plant or model
    w = np.asarray(w, dtype=float).reshape(-1, model.n)
    controller = ImcController(model, equilibrium, result, operator)
    controller.start(x0)

    T = w.shape[0]
    xs, us, ys = np.zeros((T, model.n)), np.zeros((T, model.m)), np.zeros((T, plant.n_y))
    ubs, uts, wes = np.zeros((T, model.m)), np.zeros((T, model.m)), np.zeros((T, model.n))

    x = np.asarray(x0, dtype=float).copy()
    for k in range(T):
        step = controller.control(x)
        xs[k], us[k], ys[k] = x, step.u, plant.output(x)
        ubs[k], uts[k], wes[k] = step.u_b, step.u_tilde_b, step.w_e
        x = plant.step(x, step.u, w[k])

    return Trajectory(x=xs, u=us, y=ys, u_b=ubs, u_tilde_b=uts, w=w.copy(), w_e=wes)


def simulate_with_operator(model: RnnModel,
                           equilibrium: Equilibrium,
                           result: SynthesisResult,
                           operator: StableOperator,
                           x0: np.ndarray,
                           w: np.ndarray) -> Trajectory:
    """Atajo de simulate_closed_loop para un StableOperator"""
    return simulate_closed_loop(model, equilibrium, result, x0, w, OperatorRunner(operator))


Policy = Callable[[int, np.ndarray], np.ndarray]


def record_policy_run(model: RnnModel,
                      equilibrium: Equilibrium,
                      result: SynthesisResult,
                      x0: np.ndarray,
                      w: np.ndarray,
                      policy: Policy) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Registra el par (Ψ^Δx, Ψ^Δu) de una política causal acotada

    La política propone un refuerzo a partir de (k, Δx(k)); se proyecta en U_b
    para que el par sea admisible.

    Returns:
        (Δx, Δu, w_e), cada uno con T filas
    """
    w = np.asarray(w, dtype=float).reshape(-1, model.n)
    T = w.shape[0]
    dxs, dus = np.zeros((T, model.n)), np.zeros((T, model.m))

    x = np.asarray(x0, dtype=float).copy()
    for k in range(T):
        dx = x - equilibrium.x_bar
        u_b = project_box(policy(k, dx), result.boost_box)
        du = result.K @ dx + u_b
        dxs[k], dus[k] = dx, du
        x = model.step(x, equilibrium.u_bar + du, w[k])

    we = np.vstack([dxs[:1], w[:-1]]) if T else np.zeros((0, model.n))
    return dxs, dus, we
