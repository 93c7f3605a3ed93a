"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes do not conform."""


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


class FormatError(ValueError):
    """Malformed on-disk data (IDX files, checkpoints, config files)."""


class DegenerateInputError(ValueError):
    """Input is structurally valid but has no usable content (e.g. fully masked batch)."""


class NonFiniteGradientError(FloatingPointError):
    """A gradient contained NaN/Inf under a policy that does not allow recovery."""


class UsageError(ValueError):
    """Bad command-line invocation; maps to exit code 2."""
