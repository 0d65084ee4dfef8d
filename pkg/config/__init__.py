"""
Configuration module for the PID-Net counting pipeline
Contains settings, constants, and default hyperparameters
"""

from config.settings import Settings, PIDNetConfig

__all__ = ['Settings', 'PIDNetConfig']
