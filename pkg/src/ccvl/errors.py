"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid construction input or experiment configuration."""


class ConvergenceError(RuntimeError):
    """An iterative solver hit its iteration cap before reaching tolerance."""

    def __init__(self, residual: float, iterations: int, what: str = "solver"):
        self.residual = float(residual)
        self.iterations = int(iterations)
        super().__init__(
            f"{what} did not converge after {iterations} iterations "
            f"(residual {residual:.3e})"
        )


class ShapeMismatchError(ValueError):
    """A stored table does not fit the environment it is evaluated on."""
