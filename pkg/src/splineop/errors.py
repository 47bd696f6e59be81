"""Exception types shared across the package."""


class InvalidSpecError(ValueError):
    """A basis, system or problem specification violates its invariants."""


class DomainError(ValueError):
    """A query point lies outside the domain it is evaluated on."""


class InvalidOrderError(ValueError):
    """A derivative order is incompatible with the spline order."""


class ConditioningError(RuntimeError):
    """A linear solve failed or a matrix is not SPD within tolerance."""


class InvalidSystemError(ValueError):
    """A dynamics specification produced non-finite samples."""


class ConfigError(ValueError):
    """Shapes, channels or configuration keys are inconsistent."""


class KindMismatchError(ValueError):
    """A model trained for one problem kind was applied to the other."""


class TrainingDivergedError(RuntimeError):
    """Training produced non-finite losses or gradients."""


# machine-parseable tags emitted by the CLI, one per exception class
ERROR_TAGS = {
    InvalidSpecError: "invalid-spec",
    DomainError: "domain",
    InvalidOrderError: "invalid-order",
    ConditioningError: "conditioning",
    InvalidSystemError: "invalid-system",
    ConfigError: "invalid-config",
    KindMismatchError: "kind-mismatch",
    TrainingDivergedError: "training-diverged",
}
