"""Models module"""
from .rnn_model import ConstraintSets, Equilibrium, RnnModel, find_equilibrium
from .ellipsoid import Ellipsoid
from .stable_operator import StableOperator
from .trajectory import Trajectory

__all__ = [
    'RnnModel',
    'Equilibrium',
    'ConstraintSets',
    'find_equilibrium',
    'Ellipsoid',
    'StableOperator',
    'Trajectory'
]
