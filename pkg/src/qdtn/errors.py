"""Exception types shared across the package."""


class GateError(ValueError):
    """A precondition ("gate") on geometry, data or coercivity was violated.

    ``rule`` names the violated rule so callers (and the CLI) can report it.
    """

    def __init__(self, rule, message):
        self.rule = rule
        super().__init__(f"[{rule}] {message}")


class SolverError(RuntimeError):
    """A linear or nonlinear solve failed to reach its tolerance."""

    def __init__(self, message, residual=None, iterations=None):
        self.residual = residual
        self.iterations = iterations
        detail = []
        if iterations is not None:
            detail.append(f"iterations={iterations}")
        if residual is not None:
            detail.append(f"residual={residual:.3e}")
        if detail:
            message = f"{message} ({', '.join(detail)})"
        super().__init__(message)
