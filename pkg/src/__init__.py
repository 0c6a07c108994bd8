"""
Boosted RNN Control - Paquete principal
"""
__version__ = "1.0.0"
