"""Fine-scale and generalized multiscale FEM solvers for linear Biot poroelasticity."""

__version__ = "0.1.0"
