"""Exception types raised across the toolkit.

Infeasible allocations are reported, never raised; everything below signals a
condition the caller has to handle.
"""


class MoeError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(MoeError, ValueError):
    """The configuration file or a config object failed validation."""


class SingularMatrixError(MoeError, ValueError):
    """The regularized channel Gram matrix cannot be inverted."""


class EmptySampleError(MoeError, ValueError):
    """A quantile was requested over an empty sample set."""


class ShapeMismatchError(MoeError, ValueError):
    """Features or logits do not match the expert architecture."""


class UntrainedExpertError(MoeError, RuntimeError):
    """Inference or evaluation was requested from an expert without parameters."""


class ModelFileError(MoeError, ValueError):
    """A model file is corrupt, truncated, of another version or for another K."""


class TrainingDivergedError(MoeError, RuntimeError):
    """Training produced a non-finite loss."""


class MisalignedAllocationsError(MoeError, ValueError):
    """The allocations passed to combine do not line up with the gate decision."""


class ExportError(MoeError, OSError):
    """Result files could not be written."""


# --- Gate errors ---

class GateError(MoeError):
    """Base class for every failure of the LLM-enabled gate."""


class UnknownExpertError(GateError, KeyError):
    """A tool call named an expert that is not in the active library."""

    def __str__(self) -> str:
        # KeyError quotes its message; keep it readable
        return str(self.args[0]) if self.args else ""


class MalformedToolCallError(GateError, ValueError):
    """The backend response does not hold exactly one well-formed tool call."""


class WeightRangeError(GateError, ValueError):
    """A tool-call weight lies outside [0, 1]."""


class WeightSumError(GateError, ValueError):
    """Tool-call weights do not sum to one within tolerance."""


class GateUnavailableError(GateError, RuntimeError):
    """The backend could not be reached or has no recorded answer."""


class ClarificationNeededError(GateError, ValueError):
    """The query does not state an objective the rule backend can act on."""


class MissingCredentialError(GateError, RuntimeError):
    """The environment variable holding the LLM credential is not set."""
