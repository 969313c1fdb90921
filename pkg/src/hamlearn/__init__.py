"""Learning Hamiltonians from trajectory data with classical and Lie group integrators."""

__version__ = "0.1.0"
