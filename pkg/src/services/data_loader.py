"""
Servicio de lectura y escritura de bundles
Modelo, síntesis, operador, trayectorias (CSV) y reportes (JSON)
"""
import json
import logging
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
import pandas as pd

from ..exceptions import BundleError
from ..models.rnn_model import ConstraintSets, Equilibrium, RnnModel
from ..models.stable_operator import StableOperator
from ..models.trajectory import Trajectory
from .lmi_synthesis import SynthesisResult

logger = logging.getLogger(__name__)

MODEL_FILE = "model.json"
SYNTHESIS_FILE = "synthesis.json"
OPERATOR_FILE = "operator.json"
REPORT_FILE = "verification.json"
TRAJECTORY_PATTERN = "trajectory_*.csv"


def trajectory_columns(n: int, m: int, n_y: int) -> List[str]:
    """Encabezado k, x_*, u_*, y_*, ub_*, ubtilde_*, w_*"""
    return (
        ["k"]
        + [f"x_{i + 1}" for i in range(n)]
        + [f"u_{i + 1}" for i in range(m)]
        + [f"y_{i + 1}" for i in range(n_y)]
        + [f"ub_{i + 1}" for i in range(m)]
        + [f"ubtilde_{i + 1}" for i in range(m)]
        + [f"w_{i + 1}" for i in range(n)]
    )


def export_trajectory(trajectory: Trajectory, path: Union[str, Path]) -> Path:
    """
    Escribe la trayectoria como CSV con precisión doble completa

    Args:
        trajectory: Trayectoria a exportar
        path: Archivo destino

    Returns:
        Ruta escrita
    """
    path = Path(path)
    columns = trajectory_columns(trajectory.n, trajectory.m, trajectory.n_y)
    data = np.hstack([
        np.arange(trajectory.horizon, dtype=float)[:, np.newaxis],
        trajectory.x, trajectory.u, trajectory.y,
        trajectory.u_b, trajectory.u_tilde_b, trajectory.w,
    ])

    df = pd.DataFrame(data, columns=columns)
    df['k'] = df['k'].astype(int)
    try:
        df.to_csv(path, index=False, float_format="%.17g")
    except OSError as exc:
        raise BundleError(f"No se pudo escribir la trayectoria en {path}: {exc}")
    return path


def load_trajectory(path: Union[str, Path]) -> Trajectory:
    """Lee una trayectoria exportada con export_trajectory"""
    path = Path(path)
    if not path.exists():
        raise BundleError(f"Archivo no encontrado: {path}")

    df = pd.read_csv(path, dtype=float)

    def block(prefix: str) -> np.ndarray:
        cols = [c for c in df.columns if c.startswith(prefix) and c[len(prefix):].isdigit()]
        cols.sort(key=lambda c: int(c[len(prefix):]))
        return df[cols].to_numpy(dtype=float).reshape(len(df), len(cols))

    return Trajectory(
        x=block("x_"), u=block("u_"), y=block("y_"),
        u_b=block("ub_"), u_tilde_b=block("ubtilde_"), w=block("w_"),
    )


class BundleLoader:
    """Cargador de artefactos de un directorio de resultados"""

    def __init__(self, bundle_dir: Union[str, Path] = "out"):
        """
        Inicializa el cargador

        Args:
            bundle_dir: Directorio donde se encuentran los artefactos
        """
        self.bundle_dir = Path(bundle_dir)

    def _path(self, filename: str) -> Path:
        return self.bundle_dir / filename

    def _write_json(self, filename: str, payload: dict) -> Path:
        self.bundle_dir.mkdir(parents=True, exist_ok=True)
        filepath = self._path(filename)
        with open(filepath, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=2, allow_nan=False)
        logger.debug("Artefacto escrito: %s", filepath)
        return filepath

    def _read_json(self, filename: str) -> dict:
        filepath = self._path(filename)
        if not filepath.exists():
            raise BundleError(f"Archivo no encontrado: {filepath}")
        try:
            with open(filepath, "r", encoding="utf-8") as fh:
                return json.load(fh)
        except json.JSONDecodeError as exc:
            raise BundleError(f"JSON inválido en {filepath}: {exc}")

    def has(self, filename: str) -> bool:
        return self._path(filename).exists()

    def save_model(self, model: RnnModel, equilibrium: Equilibrium,
                   constraints: ConstraintSets) -> Path:
        payload = model.to_dict(equilibrium)
        payload['constraints'] = constraints.to_dict()
        return self._write_json(MODEL_FILE, payload)

    def load_model(self) -> Tuple[RnnModel, Equilibrium, ConstraintSets]:
        """
        Carga el modelo con su equilibrio y restricciones

        Returns:
            Tuple (model, equilibrium, constraints)
        """
        data = self._read_json(MODEL_FILE)
        try:
            model, equilibrium = RnnModel.from_dict(data)
            constraints = ConstraintSets.from_dict(data['constraints'])
        except KeyError as exc:
            raise BundleError(f"Falta la clave {exc} en {MODEL_FILE}")
        if equilibrium is None:
            raise BundleError(f"{MODEL_FILE} no contiene el bloque de equilibrio")
        return model, equilibrium, constraints

    def save_synthesis(self, result: SynthesisResult) -> Path:
        return self._write_json(SYNTHESIS_FILE, result.to_dict())

    def load_synthesis(self) -> SynthesisResult:
        data = self._read_json(SYNTHESIS_FILE)
        try:
            return SynthesisResult.from_dict(data)
        except KeyError as exc:
            raise BundleError(f"Falta la clave {exc} en {SYNTHESIS_FILE}")

    def save_operator(self, operator: StableOperator, epoch: int = 0,
                      seed: Optional[int] = None, history: Optional[dict] = None) -> Path:
        """Checkpoint: θ serializado + época + semilla"""
        payload = {'theta': operator.to_dict(), 'epoch': epoch, 'seed': seed}
        if history is not None:
            payload['training'] = history
        return self._write_json(OPERATOR_FILE, payload)

    def load_operator(self) -> StableOperator:
        data = self._read_json(OPERATOR_FILE)
        try:
            return StableOperator.from_dict(data['theta'])
        except KeyError as exc:
            raise BundleError(f"Falta la clave {exc} en {OPERATOR_FILE}")

    def save_trajectory(self, trajectory: Trajectory, index: int) -> Path:
        self.bundle_dir.mkdir(parents=True, exist_ok=True)
        return export_trajectory(trajectory, self._path(f"trajectory_{index:03d}.csv"))

    def load_trajectories(self) -> List[Trajectory]:
        return [load_trajectory(p) for p in sorted(self.bundle_dir.glob(TRAJECTORY_PATTERN))]

    def save_report(self, report: dict, filename: str = REPORT_FILE) -> Path:
        return self._write_json(filename, report)

    def load_report(self, filename: str = REPORT_FILE) -> dict:
        return self._read_json(filename)

    def load_complete_bundle(self) -> Dict[str, object]:
        """
        Carga todos los artefactos disponibles

        Returns:
            Diccionario con modelo, equilibrio, restricciones, síntesis,
            operador y reporte de verificación (o None) y trayectorias
        """
        model, equilibrium, constraints = self.load_model()

        return {
            'model': model,
            'equilibrium': equilibrium,
            'constraints': constraints,
            'synthesis': self.load_synthesis(),
            'operator': self.load_operator() if self.has(OPERATOR_FILE) else None,
            'report': self.load_report() if self.has(REPORT_FILE) else None,
            'trajectories': self.load_trajectories(),
            'n_states': model.n,
            'n_inputs': model.m,
        }
