"""
Certificados de estabilidad y verificaciones de lazo cerrado
Constantes de decaimiento, cotas ℓp, invariancia del conjunto RPI y
satisfacción de restricciones
"""
import logging
import math
from dataclasses import dataclass
from typing import Dict, Optional, Union

import numpy as np

from ..exceptions import DegenerateCertificateError
from ..models.ellipsoid import Ellipsoid
from ..models.rnn_model import ConstraintSets, Equilibrium, RnnModel
from ..models.trajectory import Trajectory
from .lmi_synthesis import SynthesisResult

logger = logging.getLogger(__name__)

Norm = Union[float, int, str]


def parse_p(p: Norm) -> float:
    """Normaliza el índice p (1, 2, 'inf', ...) a float en [1, ∞]"""
    value = float('inf') if str(p).lower() in ('inf', 'infinity') else float(p)
    if not value >= 1.0:
        raise ValueError(f"p debe estar en [1, ∞], recibido {p}")
    return value


def mu(a: float, p: Norm) -> float:
    """μ_p = (1 / (1 - a^p))^(1/p); μ_∞ = 1"""
    p = parse_p(p)
    if math.isinf(p):
        return 1.0
    return (1.0 / (1.0 - a ** p)) ** (1.0 / p)


def sequence_norm(sequence: np.ndarray, p: Norm) -> float:
    """Norma ℓp temporal de las normas euclídeas por muestra"""
    sequence = np.asarray(sequence, dtype=float)
    if sequence.size == 0:
        return 0.0
    samples = np.linalg.norm(sequence.reshape(sequence.shape[0], -1), axis=1)
    return float(np.linalg.norm(samples, ord=parse_p(p)))


@dataclass(frozen=True)
class StabilityCertificate:
    """Constantes de estabilidad y coeficientes de las cotas ℓp"""
    a: float
    a_tilde: float
    kappa0: float
    kappa1: float
    sigma_x: float
    sigma_ws: float
    p: float
    mu_p: float
    k_norm: float
    gain_x_we: float
    gain_x_ub: float
    gain_u_we: float
    gain_u_ub: float

    def mu(self, p: Norm) -> float:
        return mu(self.a, p)

    def convergence_horizon(self, ratio: float = 1e-6) -> int:
        """Pasos para que κ₀ a^k caiga por debajo de ratio"""
        if self.a == 0.0:
            return 1
        return max(1, math.ceil(math.log(ratio / max(self.kappa0, 1.0)) / math.log(self.a)))

    def to_dict(self) -> dict:
        return {
            key: (None if isinstance(value, float) and math.isinf(value) else value)
            for key, value in self.__dict__.items()
        }


def _k_norm(K: np.ndarray, p: float) -> float:
    """max(|K|_p, |K|_2); la cota usa normas euclídeas por muestra"""
    spectral = float(np.linalg.norm(K, 2))
    if p in (1.0, float('inf')):
        return max(float(np.linalg.norm(K, p)), spectral)
    return spectral


def build_certificate(result: SynthesisResult, p: Norm = 2) -> StabilityCertificate:
    """
    Construye las constantes de decaimiento y ganancia

    Args:
        result: Resultado de la síntesis
        p: Índice de la norma ℓp

    Returns:
        StabilityCertificate
    """
    p = parse_p(p)
    P = result.P_s
    eig_P = np.linalg.eigvalsh(P)
    lam_min, lam_max = float(eig_P[0]), float(eig_P[-1])
    if lam_min <= 0:
        raise DegenerateCertificateError(f"P_s no es definida positiva: λ_min(P_s) = {lam_min:.3e}")

    sigma_x = float(np.linalg.eigvalsh(P @ result.Qtilde_sx @ P).min())
    sigma_ws = float(max(np.linalg.eigvalsh(result.Q_sws).max(), 0.0))

    a_tilde = 1.0 - sigma_x / lam_max
    if a_tilde >= 1.0:
        raise DegenerateCertificateError(
            f"Certificado degenerado: λ_min(P_s Q̃_sx P_s) = {sigma_x:.3e} da ã = {a_tilde:.6g} >= 1"
        )
    a_tilde = max(a_tilde, 0.0)
    a = math.sqrt(a_tilde)

    kappa0 = math.sqrt(lam_max / lam_min)
    kappa1 = math.sqrt(sigma_ws / lam_min)
    mu_p = mu(a, p)
    k_norm = _k_norm(result.K, p)

    gain_x_ub = kappa1 / (1.0 - a)
    gain_x_we = kappa0 * mu_p + gain_x_ub

    return StabilityCertificate(
        a=a, a_tilde=a_tilde, kappa0=kappa0, kappa1=kappa1,
        sigma_x=sigma_x, sigma_ws=sigma_ws, p=p, mu_p=mu_p, k_norm=k_norm,
        gain_x_we=gain_x_we, gain_x_ub=gain_x_ub,
        gain_u_we=k_norm * gain_x_we, gain_u_ub=k_norm * gain_x_ub + 1.0,
    )


def _report(condition: str, passed: bool, worst: float, samples: int,
            seed: Optional[int], **extra) -> Dict[str, object]:
    report = {
        'condition': condition,
        'pass': bool(passed),
        'worst_violation': float(worst),
        'samples': int(samples),
        'seed': seed,
    }
    report.update(extra)
    return report


def check_rpi_montecarlo(model: RnnModel,
                         result: SynthesisResult,
                         equilibrium: Equilibrium,
                         constraints: ConstraintSets,
                         samples: int = 10_000,
                         seed: int = 0,
                         K: Optional[np.ndarray] = None,
                         tol: float = 1e-9,
                         batch_size: int = 4096) -> Dict[str, object]:
    """
    Falsificación por muestreo de la invariancia de E(P_s/γ_s) ⊕ x̄

    Estados uniformes en el elipsoide (una fracción sobre la frontera),
    perturbaciones uniformes en E(Q_w^0) y refuerzos uniformes en U_b. Los
    lotes se generan con semillas derivadas de (seed, índice de lote).

    Args:
        K: Ganancia alternativa (falsificación); por defecto result.K

    Returns:
        Reporte {condition, pass, worst_violation, samples, seed, failures}
    """
    K = result.K if K is None else np.asarray(K, dtype=float)
    rpi = result.rpi_set()
    disturbances = Ellipsoid.centered(constraints.Q_w0)
    half = result.boost_box.half_widths

    worst, failures = 0.0, 0
    children = np.random.SeedSequence(seed).spawn(max(1, math.ceil(samples / batch_size)))
    remaining = samples
    for child in children:
        count = min(batch_size, remaining)
        remaining -= count
        if count <= 0:
            break
        rng = np.random.default_rng(child)

        dx = rpi.sample(count, rng, surface_fraction=0.5)
        w = disturbances.sample(count, rng)
        u_b = rng.uniform(-half, half, size=(count, model.m))

        u = equilibrium.u_bar + dx @ K.T + u_b
        dx_next = model.step(equilibrium.x_bar + dx, u, w) - equilibrium.x_bar

        violation = rpi.violation(dx_next)
        worst = max(worst, float(violation.max()))
        failures += int(np.sum(violation > tol))

    passed = worst <= tol
    if not passed:
        logger.warning("Invariancia violada en %d de %d muestras (peor %.3e)", failures, samples, worst)

    return _report("rpi", passed, worst, samples, seed, failures=failures)


def check_constraints_along(trajectory: Trajectory,
                            constraints: ConstraintSets,
                            tol: float = 1e-9) -> Dict[str, object]:
    """
    Residuos de los politopos paso a paso

    Returns:
        Reporte con el peor residuo de entrada y de salida
    """
    if trajectory.horizon == 0:
        return _report("constraints", True, -np.inf, 0, None,
                       input_worst=-np.inf, output_worst=-np.inf)

    input_res = constraints.input_residual(trajectory.u)
    output_res = constraints.output_residual(trajectory.y)
    input_worst, output_worst = float(input_res.max()), float(output_res.max())
    worst = max(input_worst, output_worst)

    return _report(
        "constraints", worst <= tol, worst, trajectory.horizon, None,
        input_worst=input_worst, output_worst=output_worst,
        first_violation=(int(np.argmax(np.maximum(input_res, output_res) > tol))
                         if worst > tol else None),
    )


def _tail_share(sequence: np.ndarray, p: float, fraction: float = 0.1) -> float:
    """Fracción de la norma ℓp aportada por el último 10% del horizonte"""
    T = sequence.shape[0]
    tail = max(1, int(math.ceil(fraction * T)))
    samples = np.linalg.norm(sequence, axis=1)
    if math.isinf(p):
        total = samples.max()
        return float(samples[-tail:].max() / total) if total > 0 else 0.0
    total = np.sum(samples ** p)
    return float(np.sum(samples[-tail:] ** p) / total) if total > 0 else 0.0


def check_lp_bound(trajectory: Trajectory,
                   certificate: StabilityCertificate,
                   equilibrium: Equilibrium,
                   p: Optional[Norm] = None,
                   rtol: float = 1e-9) -> Dict[str, object]:
    """
    Verifica las cotas de ganancia sobre un horizonte finito

        ‖Δx‖_p <= g_x,we ‖w_e‖_p + g_x,ub ‖u_b‖_p
        ‖Δu‖_p <= g_u,we ‖w_e‖_p + g_u,ub ‖u_b‖_p

    Args:
        p: Índice de la norma; por defecto el del certificado

    Returns:
        Reporte con normas, cotas, holguras y aviso de energía en la cola
    """
    p = certificate.p if p is None else parse_p(p)
    if p != certificate.p:
        raise ValueError(f"El certificado se construyó para p={certificate.p}, no p={p}")

    dx = trajectory.delta_x(equilibrium.x_bar)
    du = trajectory.delta_u(equilibrium.u_bar)
    we = trajectory.exogenous(equilibrium.x_bar)

    norm_dx, norm_du = sequence_norm(dx, p), sequence_norm(du, p)
    norm_we, norm_ub = sequence_norm(we, p), sequence_norm(trajectory.u_b, p)

    bound_x = certificate.gain_x_we * norm_we + certificate.gain_x_ub * norm_ub
    bound_u = certificate.gain_u_we * norm_we + certificate.gain_u_ub * norm_ub
    slack_x, slack_u = bound_x - norm_dx, bound_u - norm_du
    tol = rtol * max(1.0, bound_x, bound_u)

    tail_warning = False
    if trajectory.horizon >= 10:
        tail = max(_tail_share(dx, p), _tail_share(du, p))
        if not math.isinf(p) and tail > 0.01:
            tail_warning = True
            logger.warning("El último 10%% del horizonte aporta %.1f%% de la norma", 100 * tail)

    return _report(
        "lp_bound", min(slack_x, slack_u) >= -tol, max(-slack_x, -slack_u),
        trajectory.horizon, None,
        p=None if math.isinf(p) else p,
        norm_dx=norm_dx, norm_du=norm_du, norm_we=norm_we, norm_ub=norm_ub,
        bound_x=bound_x, bound_u=bound_u, tail_warning=tail_warning,
    )


def check_incremental_convergence(model: RnnModel,
                                  result: SynthesisResult,
                                  equilibrium: Equilibrium,
                                  certificate: StabilityCertificate,
                                  dx0_a: np.ndarray,
                                  dx0_b: np.ndarray,
                                  w: np.ndarray,
                                  u_b: np.ndarray,
                                  ratio: float = 1e-6,
                                  slack: float = 2.0) -> Dict[str, object]:
    """
    Convergencia incremental: dos corridas con iguales (w, u_b) y estados
    iniciales distintos dentro del conjunto RPI

    La desviación debe caer a ratio veces su valor inicial antes del
    horizonte ⌈log(ratio/κ₀)/log a⌉ multiplicado por slack.

    Args:
        w: Perturbaciones (T, n)
        u_b: Refuerzos (T, m), dentro de U_b

    Returns:
        Reporte con el paso de convergencia observado
    """
    w = np.atleast_2d(np.asarray(w, dtype=float))
    u_b = np.atleast_2d(np.asarray(u_b, dtype=float))
    predicted = certificate.convergence_horizon(ratio)
    horizon = min(w.shape[0], int(math.ceil(slack * predicted)) + 10)

    x_a = equilibrium.x_bar + np.asarray(dx0_a, dtype=float)
    x_b = equilibrium.x_bar + np.asarray(dx0_b, dtype=float)
    d0 = float(np.linalg.norm(x_a - x_b))
    if d0 == 0.0:
        return _report("incremental", True, 0.0, 0, None, converged_at=0, predicted=predicted)

    converged_at = None
    ratios = []
    for k in range(horizon):
        r = float(np.linalg.norm(x_a - x_b)) / d0
        ratios.append(r)
        if r <= ratio:
            converged_at = k
            break
        u_a = equilibrium.u_bar + result.K @ (x_a - equilibrium.x_bar) + u_b[k]
        u_bb = equilibrium.u_bar + result.K @ (x_b - equilibrium.x_bar) + u_b[k]
        x_a = model.step(x_a, u_a, w[k])
        x_b = model.step(x_b, u_bb, w[k])

    return _report(
        "incremental", converged_at is not None, min(ratios) - ratio, horizon, None,
        converged_at=converged_at, predicted=predicted,
    )


def check_p_form(model: RnnModel,
                 result: SynthesisResult,
                 equilibrium: Equilibrium,
                 constraints: ConstraintSets,
                 tol: float = 1e-7) -> Dict[str, object]:
    """
    Forma en P de 6e/6f

    Multiplicar [[Q_s/γ_s, Q_s cᵀ], [c Q_s, m²]] por diag(P_s, 1) a ambos
    lados da [[P_s/γ_s, cᵀ], [c, m²]], que debe ser semidefinida positiva.
    """
    P, gamma = result.P_s, result.gamma_s
    rows = []

    output_margin = constraints.b_y - constraints.G_y @ model.C @ equilibrium.x_bar
    for r in range(constraints.n_r):
        rows.append((constraints.G_y[r] @ model.C, output_margin[r]))

    box = result.boost_box
    for t in range(constraints.n_t):
        g_row = constraints.G_u[t]
        margin = constraints.b_u[t] - g_row @ equilibrium.u_bar - box.max_over_box(g_row)
        rows.append((g_row @ result.K, margin))

    worst = np.inf
    for c, margin in rows:
        M = np.block([[P / gamma, c[:, np.newaxis]], [c[np.newaxis, :], np.array([[margin ** 2]])]])
        scale = max(1.0, float(np.abs(M).max()))
        worst = min(worst, float(np.linalg.eigvalsh(M).min()) / scale)

    worst = float(worst) if rows else 0.0
    return _report("p_form", worst >= -tol, -worst, len(rows), None)
