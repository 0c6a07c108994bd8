"""
Operador recurrente ℓp-estable para cualquier valor de sus parámetros

    ξ(k+1) = A_M ξ(k) + B_w w_e(k)
    m(k)   = C_m tanh(ξ(k)) + D_m w_e(k)

con A_M = ρ / (‖W‖₂ + ε) · W, de modo que ‖A_M‖₂ <= ρ < 1 para todo W.
"""
import logging
import warnings
from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

logger = logging.getLogger(__name__)

DTYPE = torch.float64

PARAMETER_NAMES = ('W', 'B_w', 'C_m', 'D_m')


def power_iteration(W: torch.Tensor,
                    tol: float = 1e-10,
                    max_iter: int = 500) -> Tuple[torch.Tensor, torch.Tensor, bool]:
    """
    Par singular dominante (u, v) de W por iteración de potencias

    El vector inicial es la fila de W de mayor norma, que nunca está en el
    núcleo de W cuando W ≠ 0. La convergencia se mide sobre el cambio del
    vector singular derecho.

    Returns:
        (u, v, converged); para W = 0 devuelve vectores nulos y converged=True
    """
    with torch.no_grad():
        u = torch.zeros(W.shape[0], dtype=W.dtype)
        row_norms = torch.linalg.vector_norm(W, dim=1)
        if W.numel() == 0 or float(row_norms.max()) <= torch.finfo(W.dtype).tiny:
            return u, torch.zeros(W.shape[1], dtype=W.dtype), True

        row = W[int(torch.argmax(row_norms))]
        v = row / torch.linalg.vector_norm(row)

        for _ in range(max_iter):
            Wv = W @ v
            u = Wv / torch.linalg.vector_norm(Wv)

            Wtu = W.T @ u
            v_new = Wtu / torch.linalg.vector_norm(Wtu)
            if torch.linalg.vector_norm(v_new - v) <= tol:
                return u, v_new, True
            v = v_new

    return u, v, False


class StableOperator(nn.Module):
    """
    Operador de refuerzo M(θ) con θ = (W, B_w, C_m, D_m)

    Trabaja en float64. Los estados ξ admiten lotes en la primera dimensión.
    """

    def __init__(self,
                 n_in: int,
                 n_out: int,
                 n_xi: int = 16,
                 rho: float = 0.95,
                 eps: float = 1e-8,
                 seed: Optional[int] = None,
                 output_scale: float = 0.0,
                 power_tol: float = 1e-10,
                 power_max_iter: int = 500):
        """
        Inicializa el operador

        Args:
            n_in: Dimensión de la entrada w_e (n)
            n_out: Dimensión de la salida (m)
            n_xi: Tamaño del estado interno
            rho: Cota de contracción en (0, 1)
            eps: Regularización de la normalización espectral
            seed: Semilla del generador de torch para la inicialización
            output_scale: Desviación de C_m y D_m iniciales (0 anula la salida)
        """
        super().__init__()

        if not 0.0 < rho < 1.0:
            raise ValueError(f"rho debe estar en (0, 1), recibido {rho}")
        if eps <= 0:
            raise ValueError("eps debe ser positivo")

        self.n_in = n_in
        self.n_out = n_out
        self.n_xi = n_xi
        self.rho = float(rho)
        self.eps = float(eps)
        self.power_tol = power_tol
        self.power_max_iter = power_max_iter

        generator = torch.Generator().manual_seed(0 if seed is None else int(seed))

        def draw(*shape, std=1.0):
            return torch.randn(*shape, generator=generator, dtype=DTYPE) * std

        self.W = nn.Parameter(draw(n_xi, n_xi, std=1.0 / np.sqrt(n_xi)))
        self.B_w = nn.Parameter(draw(n_xi, n_in, std=1.0 / np.sqrt(max(n_in, 1))))
        self.C_m = nn.Parameter(draw(n_out, n_xi, std=output_scale))
        self.D_m = nn.Parameter(draw(n_out, n_in, std=output_scale))

    def spectral_norm(self) -> torch.Tensor:
        """
        ‖W‖₂ diferenciable

        Con el par singular (u, v) fijo, σ = uᵀ W v tiene gradiente u vᵀ.
        La estimación se contrasta con los valores singulares de W; si la
        iteración no converge o se queda por debajo de ‖W‖₂ se usa la norma
        de Frobenius, que acota ‖W‖₂ por arriba.
        """
        u, v, converged = power_iteration(self.W, self.power_tol, self.power_max_iter)

        estimate = u @ self.W @ v
        if converged and self.W.numel():
            with torch.no_grad():
                exact = torch.linalg.svdvals(self.W)[0]
            if estimate.detach() < exact * (1.0 - 1e-9):
                logger.warning("Par singular no dominante: %.6g < ‖W‖₂ = %.6g",
                               float(estimate), float(exact))
                converged = False

        if not converged:
            warnings.warn(
                "La iteración de potencias no convergió; se usa la norma de Frobenius",
                RuntimeWarning,
            )
            logger.warning("Iteración de potencias sin convergencia (n_xi=%d)", self.n_xi)
            return torch.linalg.matrix_norm(self.W, ord='fro')

        return estimate

    def effective_recurrence(self) -> torch.Tensor:
        """A_M = ρ / (‖W‖₂ + ε) · W"""
        return self.rho / (self.spectral_norm() + self.eps) * self.W

    def initial_state(self, batch: Optional[int] = None) -> torch.Tensor:
        shape = (self.n_xi,) if batch is None else (batch, self.n_xi)
        return torch.zeros(shape, dtype=DTYPE)

    def step(self, xi: torch.Tensor, we: torch.Tensor,
             A_M: Optional[torch.Tensor] = None) -> Tuple[torch.Tensor, torch.Tensor]:
        """
        Un paso del operador

        Args:
            xi: Estado interno (n_xi,) o (S, n_xi)
            we: Muestra de w_e (n,) o (S, n)
            A_M: Recurrencia efectiva precalculada

        Returns:
            (xi_next, m_out)
        """
        if A_M is None:
            A_M = self.effective_recurrence()

        xi_next = F.linear(xi, A_M) + F.linear(we, self.B_w)
        m_out = F.linear(torch.tanh(xi), self.C_m) + F.linear(we, self.D_m)
        return xi_next, m_out

    def forward(self, we_sequence: torch.Tensor,
                xi0: Optional[torch.Tensor] = None) -> torch.Tensor:
        """
        Evalúa el operador sobre una secuencia

        Args:
            we_sequence: (T, n) o (S, T, n)

        Returns:
            Salidas (T, m) o (S, T, m)
        """
        batched = we_sequence.dim() == 3
        xi = xi0 if xi0 is not None else self.initial_state(we_sequence.shape[0] if batched else None)
        A_M = self.effective_recurrence()

        outputs = []
        for k in range(we_sequence.shape[-2]):
            xi, out = self.step(xi, we_sequence[..., k, :], A_M)
            outputs.append(out)

        if not outputs:
            shape = we_sequence.shape[:-1] + (self.n_out,)
            return torch.zeros(shape, dtype=DTYPE)
        return torch.stack(outputs, dim=-2)

    def gain_bound(self) -> float:
        """γ(M) <= ‖D_m‖₂ + ‖C_m‖₂ ‖B_w‖₂ / (1 - ρ)"""
        with torch.no_grad():
            d_norm = torch.linalg.matrix_norm(self.D_m, ord=2) if self.D_m.numel() else torch.tensor(0.0)
            c_norm = torch.linalg.matrix_norm(self.C_m, ord=2) if self.C_m.numel() else torch.tensor(0.0)
            b_norm = torch.linalg.matrix_norm(self.B_w, ord=2) if self.B_w.numel() else torch.tensor(0.0)
        return float(d_norm + c_norm * b_norm / (1.0 - self.rho))

    def parameters_numpy(self) -> Dict[str, np.ndarray]:
        return {name: getattr(self, name).detach().numpy().copy() for name in PARAMETER_NAMES}

    def load_numpy(self, values: Dict[str, np.ndarray]) -> None:
        """Carga parámetros desde arreglos numpy (mismas formas)"""
        with torch.no_grad():
            for name in PARAMETER_NAMES:
                target = getattr(self, name)
                value = torch.as_tensor(np.asarray(values[name], dtype=float), dtype=DTYPE)
                if value.shape != target.shape:
                    raise ValueError(f"Forma inválida para {name}: {tuple(value.shape)}")
                target.copy_(value)

    def to_dict(self) -> dict:
        data = {
            'n_in': self.n_in,
            'n_out': self.n_out,
            'n_xi': self.n_xi,
            'rho': self.rho,
            'eps': self.eps,
        }
        data.update({name: value.tolist() for name, value in self.parameters_numpy().items()})
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "StableOperator":
        operator = cls(
            n_in=int(data['n_in']), n_out=int(data['n_out']), n_xi=int(data['n_xi']),
            rho=float(data['rho']), eps=float(data['eps']),
        )
        operator.load_numpy({name: np.array(data[name], dtype=float).reshape(
            getattr(operator, name).shape) for name in PARAMETER_NAMES})
        return operator


def operator_step(operator: StableOperator,
                  xi: np.ndarray,
                  we_k: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Versión numpy de StableOperator.step"""
    with torch.no_grad():
        xi_next, out = operator.step(
            torch.as_tensor(np.asarray(xi, dtype=float)),
            torch.as_tensor(np.asarray(we_k, dtype=float)),
        )
    return xi_next.numpy(), out.numpy()


class OperatorRunner:
    """Evaluación causal muestra a muestra con estado interno (numpy)"""

    def __init__(self, operator: StableOperator):
        self.operator = operator
        with torch.no_grad():
            self._A_M = operator.effective_recurrence()
        self.reset()

    def reset(self) -> None:
        self._xi = self.operator.initial_state()

    @property
    def state(self) -> np.ndarray:
        return self._xi.numpy().copy()

    def __call__(self, we_k: np.ndarray) -> np.ndarray:
        with torch.no_grad():
            self._xi, out = self.operator.step(
                self._xi, torch.as_tensor(np.asarray(we_k, dtype=float)), self._A_M
            )
        return out.numpy()


@dataclass
class OperatorTape:
    """Registro de una evaluación: estado inicial, entradas y estados por paso"""
    xi0: np.ndarray
    we: np.ndarray
    xi: np.ndarray
    outputs: np.ndarray


def record_tape(operator: StableOperator,
                we_sequence: np.ndarray,
                xi0: Optional[np.ndarray] = None) -> OperatorTape:
    """Evalúa el operador y registra (ξ, w_e) por paso"""
    we_sequence = np.atleast_2d(np.asarray(we_sequence, dtype=float))
    xi = operator.initial_state() if xi0 is None else torch.as_tensor(np.asarray(xi0, dtype=float))
    start = xi.numpy().copy()

    states, outputs = [], []
    with torch.no_grad():
        A_M = operator.effective_recurrence()
        for we_k in we_sequence:
            states.append(xi.numpy().copy())
            xi, out = operator.step(xi, torch.as_tensor(we_k), A_M)
            outputs.append(out.numpy().copy())

    return OperatorTape(
        xi0=start,
        we=we_sequence,
        xi=np.array(states).reshape(len(states), operator.n_xi),
        outputs=np.array(outputs).reshape(len(outputs), operator.n_out),
    )


def operator_adjoint(operator: StableOperator,
                     tape: OperatorTape,
                     output_cotangents: np.ndarray) -> Dict[str, np.ndarray]:
    """
    Gradientes exactos de Σ_k ⟨c_k, m(k)⟩ respecto de θ

    Reproduce la evaluación registrada en la cinta con autograd, incluida la
    dependencia de la normalización espectral.

    Args:
        operator: Operador evaluado
        tape: Cinta de record_tape
        output_cotangents: Cotangentes (T, m)

    Returns:
        Diccionario nombre -> gradiente con la forma del parámetro
    """
    cotangents = torch.as_tensor(np.asarray(output_cotangents, dtype=float))
    if cotangents.shape != (tape.we.shape[0], operator.n_out):
        raise ValueError(
            f"Cotangentes de forma {tuple(cotangents.shape)}, se esperaba {(tape.we.shape[0], operator.n_out)}"
        )

    params = [getattr(operator, name) for name in PARAMETER_NAMES]
    if tape.we.shape[0] == 0:
        return {name: np.zeros(tuple(p.shape)) for name, p in zip(PARAMETER_NAMES, params)}

    outputs = operator(torch.as_tensor(tape.we), xi0=torch.as_tensor(tape.xi0))
    scalar = torch.sum(outputs * cotangents)
    grads = torch.autograd.grad(scalar, params, allow_unused=True)

    return {
        name: (np.zeros(tuple(p.shape)) if g is None else g.detach().numpy())
        for name, p, g in zip(PARAMETER_NAMES, params, grads)
    }
