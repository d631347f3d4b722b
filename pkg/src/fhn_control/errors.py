"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """A scenario or parameter value violates its declared invariant."""


class ContractViolation(ValueError):
    """Operands passed to an operation do not satisfy its preconditions
    (mismatched grids, inconsistent time grids, ...)."""


class BlowUpError(RuntimeError):
    """The state norm exceeded the blow-up threshold during integration.

    The cubic reaction term is stabilizing, so this signals a
    mis-configured run rather than genuine model behaviour.
    """

    def __init__(self, step: int, norm: float):
        self.step = step
        self.norm = norm
        super().__init__(
            f"state blow-up at step {step}: |X|_H = {norm:.3e} "
            "(threshold 1e6); check dt and parameters"
        )
