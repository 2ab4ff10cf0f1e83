"""Exception hierarchy shared by all modules."""


class CompliantError(Exception):
    """Base class for every error raised by this package."""


class MeshError(CompliantError, ValueError):
    pass


class ConfigError(CompliantError, ValueError):
    pass


class ElementInversionError(CompliantError):
    def __init__(self, tet: int, volume: float):
        super().__init__(f"element inversion in tet {tet} (current volume {volume:.3e})")
        self.tet = tet
        self.volume = volume


class ConvergenceError(CompliantError):
    def __init__(self, message: str, residual: float):
        super().__init__(f"{message} (last residual {residual:.3e})")
        self.residual = residual


class FactorizationError(CompliantError):
    pass


class DegenerateConstraintError(CompliantError):
    pass


class SingularityError(CompliantError):
    def __init__(self, message: str, cond: float = float("inf")):
        super().__init__(f"{message} (condition number {cond:.3e})")
        self.cond = cond


class InfeasibleError(CompliantError):
    """Raised when the constraint boxes of a QP admit no common point.

    ``violation`` is the smallest achievable constraint violation (the
    certificate) and ``lam`` the point attaining it.
    """

    def __init__(self, violation: float, lam):
        super().__init__(f"QP constraints are infeasible (minimal violation {violation:.3e})")
        self.violation = violation
        self.lam = lam


class CollectionError(CompliantError):
    pass


class TrainingError(CompliantError):
    pass
