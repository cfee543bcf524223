"""Exception hierarchy shared by every biascite module

All errors raised on purpose by the package derive from :class:`BiasCiteError` so that the
command line entry point can turn them into a single structured error object. Errors that
describe a bad input value additionally derive from :class:`ValueError`.
"""
from typing import Any
from typing import Dict


class BiasCiteError(Exception):
    """Base class for all biascite errors"""

    def to_dict(self) -> Dict[str, Any]:
        """Structured form of the error used by the CLI"""
        return {"error": type(self).__name__, "message": str(self)}


class ConfigError(BiasCiteError, ValueError):
    """A configuration value violates its declared invariant"""


class MalformedRecord(BiasCiteError, ValueError):
    """A line of a record stream could not be decoded into a paper record

    :param line_no: One-based line number of the offending line
    :param reason: Human readable description of the problem
    """

    def __init__(self, line_no: int, reason: str):
        super().__init__(f"line {line_no}: {reason}")
        self.line_no = line_no
        self.reason = reason


class IngestError(BiasCiteError, ValueError):
    """Every line of a non-empty record stream was malformed"""


class MissingFeatures(BiasCiteError, KeyError):
    """No feature vector was supplied for a paper"""

    def __init__(self, paper_id: str):
        super().__init__(paper_id)
        self.paper_id = paper_id

    def __str__(self) -> str:
        return f"no feature vector for paper '{self.paper_id}'"


class OverlappingYearRanges(BiasCiteError, ValueError):
    """Two split year ranges share at least one year"""


class ShapeMismatch(BiasCiteError, ValueError):
    """Operand shapes are incompatible with the requested operation"""


class NonFiniteValue(BiasCiteError, FloatingPointError):
    """An operation produced NaN or infinite entries"""


class NonScalarLoss(BiasCiteError, ValueError):
    """Backward was requested on a tensor with more than one element"""


class ModeGraphMismatch(BiasCiteError, ValueError):
    """The encoder mode does not match the graph view it was given"""


class EmptyEnvironment(BiasCiteError, ValueError):
    """A batch holds no sample of an environment"""


class NonActionableFactor(BiasCiteError, ValueError):
    """A counterfactual intervention was requested on a non-actionable factor"""


class LengthMismatch(BiasCiteError, ValueError):
    """Paired metric inputs have different lengths"""


class EmptyInput(BiasCiteError, ValueError):
    """A metric was requested over zero items"""


class UntrainedCheckpoint(BiasCiteError, ValueError):
    """A checkpoint was produced without any completed training epoch"""


class NonFiniteLoss(BiasCiteError, FloatingPointError):
    """The training objective became NaN or infinite

    :param diagnostics: Per-term loss values recorded before the failure
    """

    def __init__(self, message: str, diagnostics: Dict[str, Any]):
        super().__init__(message)
        self.diagnostics = diagnostics

    def to_dict(self) -> Dict[str, Any]:
        data = super().to_dict()
        data["diagnostics"] = self.diagnostics
        return data


class ScorerError(BiasCiteError, RuntimeError):
    """The external text-quality scorer failed or answered nonsense"""


class ScorerTimeout(ScorerError):
    """The external text-quality scorer did not answer in time"""


class VerifierUnavailable(BiasCiteError, RuntimeError):
    """The repository verification service could not be reached"""
