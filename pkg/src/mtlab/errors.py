"""Exception types raised across the package."""


class MTLabError(Exception):
    """Base class for all errors raised by mtlab."""


class DomainError(MTLabError, ValueError):
    """A frequency point lies outside the parameter domain of the patch."""


class ResolutionError(MTLabError, ValueError):
    """A density is sampled too coarsely for the requested spatial scale."""


class BudgetError(MTLabError, MemoryError):
    """A computation would exceed the configured memory budget."""

    def __init__(self, required, budget):
        self.required = int(required)
        self.budget = int(budget)
        super().__init__(
            f"estimated {self.required} bytes exceeds budget of {self.budget} bytes"
        )


class GeometryError(MTLabError, ValueError):
    """Grids do not match, or geometric objects violate a required relation."""


class ScaleError(MTLabError, ValueError):
    """A scale parameter is too small for the requested construction."""


class FitError(MTLabError, ValueError):
    """Too few points to fit an exponent."""


class StateError(MTLabError, RuntimeError):
    """An operation was called before a required earlier stage."""


class InvariantError(MTLabError, AssertionError):
    """A checked invariant failed. ``name`` identifies which one."""

    def __init__(self, name, detail=""):
        self.name = name
        super().__init__(f"{name}: {detail}" if detail else name)


class ConfigError(MTLabError, ValueError):
    """A configuration file, override or scenario name is malformed."""
