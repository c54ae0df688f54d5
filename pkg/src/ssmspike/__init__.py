"""State-space-model inspired multiple-input multiple-output spiking neurons."""

__version__ = "0.1.0"
