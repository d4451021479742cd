"""Exception types shared across the package."""


class LLMSchedError(Exception):
    """Base class for all errors raised by this package."""


class StructuralError(LLMSchedError):
    """Malformed DAG: cycle, bad edge, invalid dynamic expansion."""


class TrainingError(LLMSchedError):
    """Profile training failed (empty trace, stage without samples, ...)."""


class RangeError(LLMSchedError):
    """Value outside its allowed domain (batch size, probability, ...)."""


class ConfigError(LLMSchedError):
    """Invalid scheduler, cluster, or workload configuration."""


class InconsistentEvidenceError(LLMSchedError):
    """Evidence assignment has zero probability under the model."""


class TraceParseError(LLMSchedError):
    """A trace file line could not be parsed."""

    def __init__(self, path: str, line_no: int, reason: str):
        self.path = path
        self.line_no = line_no
        self.reason = reason
        super().__init__(f"{path}:{line_no}: {reason}")
