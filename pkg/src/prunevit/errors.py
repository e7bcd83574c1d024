"""Exception types shared across the package."""


class PruneVitError(Exception):
    """Base class for package-specific errors."""


class ShapeError(PruneVitError, ValueError):
    """Operand extents are incompatible."""


class ConfigError(PruneVitError, ValueError):
    """Invalid architecture or run configuration."""


class ContractError(PruneVitError, ValueError):
    """An operation was invoked outside its contract."""


class EmptyPoolError(PruneVitError, ValueError):
    """A masked reduction received a mask selecting no entries."""


class TableValidationError(PruneVitError, ValueError):
    """A latency table failed format or monotonicity validation."""

    def __init__(self, message: str, row: int | None = None):
        if row is not None:
            message = f"{message} (row {row})"
        super().__init__(message)
        self.row = row


class RateRangeError(PruneVitError, ValueError):
    """Pruning rate outside the measured table range; no extrapolation."""


class InfeasibleBudgetError(PruneVitError, ValueError):
    """No plan on the rate grid meets the latency budget."""

    def __init__(self, budget_ms: float, min_latency_ms: float):
        super().__init__(
            f"budget {budget_ms:.3f} ms infeasible; minimum achievable "
            f"latency is {min_latency_ms:.3f} ms"
        )
        self.budget_ms = budget_ms
        self.min_latency_ms = min_latency_ms


class DivergenceError(PruneVitError, RuntimeError):
    """Training produced a non-finite loss; last good state attached."""

    def __init__(self, message: str, last_good=None):
        super().__init__(message)
        self.last_good = last_good


class DigestError(PruneVitError, ValueError):
    """Weight file does not match the active configuration."""
