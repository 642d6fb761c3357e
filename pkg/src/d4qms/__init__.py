"""Statevector emulation and quantum Metropolis sampling for a D4 lattice
gauge theory on a 2x1 periodic lattice."""

__version__ = "0.1.0"
