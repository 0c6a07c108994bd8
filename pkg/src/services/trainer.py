"""
Entrenamiento del operador de refuerzo
Muestreo de escenarios, funciones de pérdida y retropropagación a través
del lazo cerrado desenrollado
"""
import copy
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional

import numpy as np
import torch
from pydantic import BaseModel, Field
from torch.nn.utils import clip_grad_norm_

from ..exceptions import DimensionError, RpiViolationError, TrainingDivergedError
from ..models.ellipsoid import Ellipsoid
from ..models.rnn_model import ConstraintSets, Equilibrium, RnnModel
from ..models.stable_operator import DTYPE, PARAMETER_NAMES, StableOperator
from .lmi_synthesis import SynthesisResult

logger = logging.getLogger(__name__)

StageHook = Callable[[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor], torch.Tensor]


@dataclass
class LossSpec:
    """
    Pérdida por etapa

    ph:         ω₁ |10^-y - 10^-ȳ| + ω₂ |u(k) - u(k-1)| + ω₃ max(|ũ_b| - u_M, 0)
    quadratic:  ω₁ (y - ȳ)²        + ω₂ |u(k) - u(k-1)| + ω₃ max(|ũ_b| - u_M, 0)
    custom:     stage_hook(u, u_prev, y, ũ_b) -> (S,)
    """
    kind: str
    y_bar: np.ndarray
    omega1: float = 1.0
    omega2: float = 0.1
    omega3: float = 0.05
    u_M: float = 0.0912
    stage_hook: Optional[StageHook] = field(default=None, repr=False)

    def __post_init__(self):
        self.y_bar = np.atleast_1d(np.asarray(self.y_bar, dtype=float))
        if self.kind not in ("ph", "quadratic", "custom"):
            raise ValueError(f"Tipo de pérdida desconocido: {self.kind}")
        if min(self.omega1, self.omega2, self.omega3) < 0:
            raise ValueError("Los pesos de la pérdida deben ser no negativos")
        if self.kind == "custom" and self.stage_hook is None:
            raise ValueError("La pérdida custom requiere stage_hook")

    @classmethod
    def ph(cls, y_bar, u_M: float = 0.0912, omega2: float = 0.1, omega3: float = 0.05) -> "LossSpec":
        """Preajuste de pH con ω₁ = 1 / 10^-ȳ"""
        y_bar = np.atleast_1d(np.asarray(y_bar, dtype=float))
        return cls("ph", y_bar, omega1=float(1.0 / 10.0 ** (-y_bar[0])),
                   omega2=omega2, omega3=omega3, u_M=u_M)

    @classmethod
    def quadratic(cls, y_bar, omega1: float = 1.0, u_M: float = 0.0912,
                  omega2: float = 0.1, omega3: float = 0.05) -> "LossSpec":
        return cls("quadratic", y_bar, omega1=omega1, omega2=omega2, omega3=omega3, u_M=u_M)

    def stage_cost(self, u: torch.Tensor, u_prev: torch.Tensor,
                   y: torch.Tensor, u_tilde: torch.Tensor) -> torch.Tensor:
        """Costo de una etapa para un lote (S,)"""
        if self.kind == "custom":
            return self.stage_hook(u, u_prev, y, u_tilde)

        y_bar = torch.as_tensor(self.y_bar, dtype=DTYPE)
        if self.kind == "ph":
            tracking = torch.abs(10.0 ** (-y) - 10.0 ** (-y_bar)).sum(dim=-1)
        else:
            tracking = ((y - y_bar) ** 2).sum(dim=-1)

        smoothness = torch.abs(u - u_prev).sum(dim=-1)
        penalty = torch.clamp(torch.abs(u_tilde) - self.u_M, min=0.0).sum(dim=-1)
        return self.omega1 * tracking + self.omega2 * smoothness + self.omega3 * penalty


@dataclass
class ScenarioBatch:
    """Lote de escenarios: perturbaciones (S, T, n) y estados iniciales Δx(0) (S, n)"""
    w: np.ndarray
    dx0: np.ndarray
    seed: Optional[int] = None
    t_cut: Optional[int] = None

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=float)
        self.dx0 = np.asarray(self.dx0, dtype=float)
        if self.w.ndim != 3 or self.dx0.shape != (self.w.shape[0], self.w.shape[2]):
            raise DimensionError(
                f"Lote inconsistente: w {self.w.shape}, dx0 {self.dx0.shape}"
            )

    @property
    def size(self) -> int:
        return self.w.shape[0]

    @property
    def horizon(self) -> int:
        return self.w.shape[1]


def sample_scenarios(constraints: ConstraintSets,
                     result: SynthesisResult,
                     S: int,
                     T: int,
                     seed: int = 0,
                     t_cut: Optional[int] = None,
                     envelope: Optional[Callable[[np.ndarray], np.ndarray]] = None,
                     randomize_initial: bool = True) -> ScenarioBatch:
    """
    Muestrea escenarios admisibles

    w(k) = envolvente(k) · ζ con ζ uniforme en E(Q_w^0). La envolvente por
    defecto vale 1 para k < t_cut y 0 después (truncamiento duro).

    Args:
        constraints: Restricciones (Q_w^0)
        result: Resultado de la síntesis (conjunto RPI)
        S: Número de escenarios
        T: Horizonte
        seed: Semilla
        t_cut: Corte de la envolvente (por defecto T)
        envelope: Envolvente alternativa k -> [0, 1]
        randomize_initial: Muestrear Δx(0) uniforme en E(P_s/γ_s)

    Returns:
        ScenarioBatch
    """
    rng = np.random.default_rng(seed)
    n = constraints.Q_w0.shape[0]

    zeta = Ellipsoid.centered(constraints.Q_w0).sample(S * T, rng).reshape(S, T, n)
    k = np.arange(T)
    if envelope is not None:
        scale = np.clip(np.asarray(envelope(k), dtype=float), 0.0, 1.0)
    else:
        cut = T if t_cut is None else t_cut
        scale = (k < cut).astype(float)
    w = zeta * scale[np.newaxis, :, np.newaxis]

    if randomize_initial:
        dx0 = result.rpi_set().sample(S, rng)
    else:
        dx0 = np.zeros((S, n))

    return ScenarioBatch(w=w, dx0=dx0, seed=seed, t_cut=t_cut)


class _TorchPlant:
    """Copia en torch de la planta para la simulación diferenciable"""

    def __init__(self, model: RnnModel, equilibrium: Equilibrium, result: SynthesisResult):
        as_t = lambda a: torch.as_tensor(np.asarray(a, dtype=float), dtype=DTYPE)
        self.model = model
        self.A_x, self.B_u, self.B_sigma = as_t(model.A_x), as_t(model.B_u), as_t(model.B_sigma)
        self.A_tilde, self.B_tilde, self.C = as_t(model.A_tilde), as_t(model.B_tilde), as_t(model.C)
        self.x_bar, self.u_bar = as_t(equilibrium.x_bar), as_t(equilibrium.u_bar)
        self.K = as_t(result.K)
        self.g_b = as_t(result.boost_box.g_b)

    def sigma(self, v: torch.Tensor) -> torch.Tensor:
        if self.model.nu == 0:
            return v
        return torch.stack(
            [act.torch_fn(v[..., i]) for i, act in enumerate(self.model.activations)], dim=-1
        )

    def step(self, x: torch.Tensor, u: torch.Tensor) -> torch.Tensor:
        v = x @ self.A_tilde.T + u @ self.B_tilde.T
        return x @ self.A_x.T + u @ self.B_u.T + self.sigma(v) @ self.B_sigma.T

    def project(self, u_tilde: torch.Tensor) -> torch.Tensor:
        """Proyección con subgradiente 1 si |G_b ũ| < 1 y 0 en otro caso"""
        z = u_tilde * self.g_b
        clipped = torch.where(torch.abs(z) < 1.0, z, z.detach().clamp(-1.0, 1.0))
        return clipped / self.g_b


@dataclass
class Rollout:
    """Resultado de una simulación por lotes"""
    loss: torch.Tensor
    y: torch.Tensor
    u: torch.Tensor
    u_b: torch.Tensor
    u_tilde: torch.Tensor


def _rollout(model: RnnModel,
             equilibrium: Equilibrium,
             result: SynthesisResult,
             operator: StableOperator,
             loss: LossSpec,
             batch: ScenarioBatch,
             rpi_tolerance: float = 1e-9) -> Rollout:
    levels = result.rpi_set().level(batch.dx0)
    if np.any(levels > 1.0 + rpi_tolerance):
        raise RpiViolationError(
            f"Δx(0) fuera del conjunto RPI en {int(np.sum(levels > 1.0 + rpi_tolerance))} escenarios"
        )

    plant = _TorchPlant(model, equilibrium, result)
    w = torch.as_tensor(batch.w, dtype=DTYPE)
    S, T = batch.size, batch.horizon

    x = plant.x_bar + torch.as_tensor(batch.dx0, dtype=DTYPE)
    xi = operator.initial_state(S)
    A_M = operator.effective_recurrence()

    u_prev = plant.u_bar.expand(S, model.m)
    prev_dx = prev_du = None
    total = torch.zeros(S, dtype=DTYPE)
    ys, us, ubs, uts = [], [], [], []

    for k in range(T):
        dx = x - plant.x_bar
        if prev_dx is None:
            we = dx
        else:
            we = dx - (plant.step(plant.x_bar + prev_dx, plant.u_bar + prev_du) - plant.x_bar)

        xi, u_tilde = operator.step(xi, we, A_M)
        u_b = plant.project(u_tilde)
        du = dx @ plant.K.T + u_b
        u = plant.u_bar + du
        y = x @ plant.C.T

        total = total + loss.stage_cost(u, u_prev, y, u_tilde)
        ys.append(y)
        us.append(u)
        ubs.append(u_b)
        uts.append(u_tilde)

        x = plant.step(x, u) + w[:, k]
        prev_dx, prev_du, u_prev = dx, du, u

    def stack(items, dim):
        return torch.stack(items, dim=1) if items else torch.zeros((S, 0, dim), dtype=DTYPE)

    return Rollout(
        loss=total.sum() / max(S, 1),
        y=stack(ys, model.n_y), u=stack(us, model.m),
        u_b=stack(ubs, model.m), u_tilde=stack(uts, model.m),
    )


def rollout_loss(model: RnnModel,
                 equilibrium: Equilibrium,
                 result: SynthesisResult,
                 operator: StableOperator,
                 loss: LossSpec,
                 batch: ScenarioBatch):
    """
    Pérdida empírica J = (1/S) Σ_s Σ_k ℓ(k) y sus gradientes exactos

    Returns:
        Tupla (J, {nombre: gradiente})
    """
    rollout = _rollout(model, equilibrium, result, operator, loss, batch)
    params = [getattr(operator, name) for name in PARAMETER_NAMES]
    if rollout.loss.requires_grad:
        grads = torch.autograd.grad(rollout.loss, params, allow_unused=True)
    else:
        grads = (None,) * len(params)

    return float(rollout.loss.detach()), {
        name: (np.zeros(tuple(p.shape)) if g is None else g.detach().numpy())
        for name, p, g in zip(PARAMETER_NAMES, params, grads)
    }


def evaluate_batch(model: RnnModel,
                   equilibrium: Equilibrium,
                   result: SynthesisResult,
                   operator: StableOperator,
                   loss: LossSpec,
                   batch: ScenarioBatch) -> Dict[str, np.ndarray]:
    """Simulación sin gradientes: pérdida y salidas (S, T, n_y)"""
    with torch.no_grad():
        rollout = _rollout(model, equilibrium, result, operator, loss, batch)
    return {
        'loss': float(rollout.loss),
        'y': rollout.y.numpy(),
        'u': rollout.u.numpy(),
        'u_b': rollout.u_b.numpy(),
    }


class OptimizerConfig(BaseModel):
    """Configuración del descenso por gradiente con momento"""
    learning_rate: float = Field(1e-2, gt=0.0, description="Tamaño de paso")
    momentum: float = Field(0.9, ge=0.0, lt=1.0, description="Momento")
    epochs: int = Field(50, ge=0, description="Número de épocas")
    clip_norm: Optional[float] = Field(1.0, gt=0.0, description="Recorte de la norma del gradiente")
    patience: Optional[int] = Field(None, ge=1, description="Épocas sin mejora antes de parar")
    min_delta: float = Field(0.0, ge=0.0, description="Mejora mínima para reiniciar la paciencia")
    restore_best: bool = Field(True, description="Recuperar los mejores parámetros al terminar")


@dataclass
class TrainingResult:
    """Historial del entrenamiento; loss_history[e] es la pérdida de θ_e"""
    operator: StableOperator
    loss_history: List[float]
    snapshots: List[Dict[str, np.ndarray]]
    best_epoch: int
    stopped_early: bool

    def operator_at(self, epoch: int) -> StableOperator:
        """Reconstruye el operador de una época intermedia"""
        snapshot = copy.deepcopy(self.operator)
        snapshot.load_numpy(self.snapshots[epoch])
        return snapshot

    def to_dict(self) -> dict:
        return {
            'loss_history': list(self.loss_history),
            'best_epoch': self.best_epoch,
            'stopped_early': self.stopped_early,
            'epochs': len(self.loss_history) - 1,
        }


def train(model: RnnModel,
          equilibrium: Equilibrium,
          result: SynthesisResult,
          operator: StableOperator,
          loss: LossSpec,
          batch: ScenarioBatch,
          config: Optional[OptimizerConfig] = None) -> TrainingResult:
    """
    Descenso por gradiente con momento sobre la pérdida empírica

    Cada θ intermedio es un operador estable, así que cualquier época puede
    desplegarse. El operador se modifica en el lugar.

    Returns:
        TrainingResult con historial y una copia de θ por época
    """
    config = config or OptimizerConfig()
    optimizer = torch.optim.SGD(operator.parameters(), lr=config.learning_rate,
                                momentum=config.momentum)

    history: List[float] = []
    snapshots: List[Dict[str, np.ndarray]] = []
    best_loss, best_epoch, stale = math.inf, 0, 0
    stopped_early = False

    for epoch in range(config.epochs + 1):
        optimizer.zero_grad()
        rollout = _rollout(model, equilibrium, result, operator, loss, batch)
        value = float(rollout.loss.detach())
        if not math.isfinite(value):
            raise TrainingDivergedError(epoch, "Pérdida no finita")

        history.append(value)
        snapshots.append(operator.parameters_numpy())

        if value < best_loss - config.min_delta:
            best_loss, best_epoch, stale = value, epoch, 0
        else:
            stale += 1

        logger.info("Época %d: pérdida %.6g", epoch, value)

        if epoch == config.epochs:
            break
        if config.patience is not None and stale >= config.patience:
            stopped_early = True
            logger.info("Parada temprana en la época %d (mejor: %d)", epoch, best_epoch)
            break

        if not rollout.loss.requires_grad:
            continue
        rollout.loss.backward()
        for p in operator.parameters():
            if p.grad is not None and not torch.all(torch.isfinite(p.grad)):
                raise TrainingDivergedError(epoch, "Gradiente no finito")

        if config.clip_norm is not None:
            clip_grad_norm_(operator.parameters(), config.clip_norm)
        optimizer.step()

    if config.restore_best:
        operator.load_numpy(snapshots[best_epoch])

    return TrainingResult(
        operator=operator, loss_history=history, snapshots=snapshots,
        best_epoch=best_epoch, stopped_early=stopped_early,
    )


def acid_deviation(y: np.ndarray, y_bar: float) -> np.ndarray:
    """
    Desviación ácida Σ_k max(10^-y - 10^-ȳ, 0) por escenario

    Args:
        y: Salidas (S, T) o (S, T, 1); (T,) para un solo escenario
    """
    y = np.asarray(y, dtype=float)
    if y.ndim == 3:
        y = y[..., 0]
    return np.sum(np.maximum(10.0 ** (-y) - 10.0 ** (-float(y_bar)), 0.0), axis=-1)


def compare_losses(model: RnnModel,
                   equilibrium: Equilibrium,
                   result: SynthesisResult,
                   train_batch: ScenarioBatch,
                   test_batch: ScenarioBatch,
                   config: Optional[OptimizerConfig] = None,
                   u_M: float = 0.0912,
                   n_xi: int = 16,
                   seed: int = 0,
                   output_scale: float = 0.01) -> Dict[str, float]:
    """
    Compara la pérdida de pH con la cuadrática en desviación ácida

    Entrena dos operadores con la misma inicialización y reporta la
    reducción porcentual media de la desviación ácida en el lote de prueba.
    """
    y_bar = float(equilibrium.y_bar[0])
    ph_loss = LossSpec.ph(equilibrium.y_bar, u_M=u_M)
    quad_loss = LossSpec.quadratic(equilibrium.y_bar, u_M=u_M)

    metrics: Dict[str, float] = {}
    for name, spec in (("ph", ph_loss), ("quadratic", quad_loss)):
        operator = StableOperator(model.n, model.m, n_xi=n_xi, seed=seed, output_scale=output_scale)
        train(model, equilibrium, result, operator, spec, train_batch, config)
        evaluation = evaluate_batch(model, equilibrium, result, operator, ph_loss, test_batch)
        metrics[f"acid_deviation_{name}"] = float(np.mean(acid_deviation(evaluation['y'], y_bar)))
        metrics[f"ph_loss_{name}"] = evaluation['loss']

    baseline = StableOperator(model.n, model.m, n_xi=n_xi, seed=seed, output_scale=0.0)
    evaluation = evaluate_batch(model, equilibrium, result, baseline, ph_loss, test_batch)
    metrics["acid_deviation_baseline"] = float(np.mean(acid_deviation(evaluation['y'], y_bar)))
    metrics["ph_loss_baseline"] = evaluation['loss']

    reference = metrics["acid_deviation_quadratic"]
    metrics["reduction_percent"] = (
        100.0 * (reference - metrics["acid_deviation_ph"]) / reference if reference > 0 else 0.0
    )
    logger.info("Reducción de desviación ácida: %.2f%%", metrics["reduction_percent"])
    return metrics
