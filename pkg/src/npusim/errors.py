"""Exception hierarchy shared across the simulator."""


class SimError(Exception):
    """Base class for all simulator errors."""


class GraphParseError(SimError):
    """Malformed graph document (bad JSON, missing keys, bad field values)."""


class UnsupportedOperatorError(SimError):
    """Graph contains an op_type the simulator does not model."""


class LinkageError(SimError):
    """Node references a tensor that is not declared in the graph."""


class UnboundSymbolError(SimError):
    """Shape binding is missing a symbolic dimension."""


class ShapeMismatchError(SimError):
    """Operator input shapes are inconsistent (e.g. GEMM inner dims disagree)."""


class DegenerateShapeError(SimError):
    """Problem dimensions too small to tile (any dim < 1)."""


class FootprintError(SimError):
    """A tile program exceeds its scratchpad or accumulator partition."""


class UnsupportedAttributeError(SimError):
    """Operator attribute outside the modeled subset (e.g. conv dilation != 1)."""


class AxisTooLargeError(SimError):
    """A normalization axis does not fit in one scratchpad partition."""


class MissingLatencyError(SimError):
    """Vector operator has no entry in the op-latency table."""


class BlockTooTallError(SimError):
    """Weight block taller than the systolic array."""


class ConfigError(SimError):
    """Invalid or inconsistent simulator configuration."""


class WorkloadError(SimError):
    """Invalid workload description."""


class ConsistencyFault(SimError):
    """Internal simulator invariant violated; always fatal."""
