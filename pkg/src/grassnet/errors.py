"""Exception types raised across the package."""


class GrassNetError(Exception):
    """Base class; the CLI maps any subclass to a nonzero exit."""


class GraphFormatError(GrassNetError, ValueError):
    pass


class EigenConvergenceError(GrassNetError, RuntimeError):
    def __init__(self, off_norm: float, sweeps: int) -> None:
        super().__init__(
            f"Jacobi did not converge after {sweeps} sweeps "
            f"(off-diagonal norm {off_norm:.3e})"
        )
        self.off_norm = off_norm
        self.sweeps = sweeps


class EigencacheError(GrassNetError, ValueError):
    pass


class ShapeError(GrassNetError, ValueError):
    pass


class ConfigError(GrassNetError, ValueError):
    pass


class TrainingDiverged(GrassNetError, FloatingPointError):
    def __init__(self, epoch: int, seed: int | None = None) -> None:
        where = f" (seed {seed})" if seed is not None else ""
        super().__init__(f"loss became NaN at epoch {epoch}{where}")
        self.epoch = epoch
        self.seed = seed
