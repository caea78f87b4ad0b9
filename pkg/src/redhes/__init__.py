"""Reduced-space gradient and batched reduced Hessian for AC power flow."""

__version__ = "0.1.0"
