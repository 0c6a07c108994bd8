"""
Fixtures compartidas: planta escalar x⁺ = 1.1x + u + w sintetizada una vez
"""
from dataclasses import dataclass

import pytest
import numpy as np

from src.models.rnn_model import ConstraintSets, Equilibrium, RnnModel, find_equilibrium
from src.services.lmi_synthesis import SynthesisOptions, SynthesisResult, synthesize


@dataclass
class SynthesizedPlant:
    model: RnnModel
    equilibrium: Equilibrium
    constraints: ConstraintSets
    result: SynthesisResult


def linear_scalar_model(a: float = 1.1, b: float = 1.0) -> RnnModel:
    """Planta lineal escalar sin no linealidades (ν = 0)"""
    return RnnModel([[a]], [[b]], np.zeros((1, 0)), np.zeros((0, 1)), np.zeros((0, 1)), [[1.0]], [])


@pytest.fixture(scope="session")
def scalar_plant():
    """Planta inestable en lazo abierto con restricciones holgadas y caja |u_b| <= 0.5"""
    model = linear_scalar_model()
    equilibrium = find_equilibrium(model, np.zeros(1))
    constraints = ConstraintSets.from_bounds([-5.0], [5.0], [-5.0], [5.0], 0.1, 1)
    result = synthesize(model, equilibrium, constraints, SynthesisOptions(boost_bound=[0.5]))
    return SynthesizedPlant(model, equilibrium, constraints, result)
