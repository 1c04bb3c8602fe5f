"""qdtn: quasilinear Dirichlet-to-Neumann maps, singular probes and
Lipschitz recovery of the nonlinearity, on P1 finite elements."""

__version__ = "0.1.0"

from .errors import GateError, SolverError  # noqa: E402

__all__ = ["GateError", "SolverError", "__version__"]
