"""Agentic surrogate development and neural-adjoint inverse design for metamaterial spectra."""

__version__ = "0.1.0"
