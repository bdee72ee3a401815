"""Batched Newton-Raphson power flow with shared sparse symbolic work."""
__version__ = "0.1.0"
