"""Services module"""
from .data_loader import BundleLoader
from .lmi_synthesis import SynthesisOptions, SynthesisResult, synthesize
from .certificates import StabilityCertificate, build_certificate
from .imc_boost import ImcController, simulate_closed_loop

__all__ = [
    'BundleLoader',
    'SynthesisOptions',
    'SynthesisResult',
    'synthesize',
    'StabilityCertificate',
    'build_certificate',
    'ImcController',
    'simulate_closed_loop'
]
