"""Photon-pair generation by SFWM in birefringent photonic-crystal fibers."""
__version__ = "0.1.0"
