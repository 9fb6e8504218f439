"""Exception hierarchy shared by the whole pipeline.

Every error carries a short machine-readable ``code`` so the CLI can emit
structured error JSON without string matching.
"""


class SemcorrError(Exception):
    code = "Error"

    def to_json(self) -> dict:
        return {"code": self.code, "message": str(self)}


# --- tensor / manifest IO ---

class BadMagic(SemcorrError):
    code = "BadMagic"


class DimMismatch(SemcorrError):
    code = "DimMismatch"


class Truncated(SemcorrError):
    code = "Truncated"


class MissingFile(SemcorrError):
    code = "MissingFile"


class InvariantViolation(SemcorrError):
    code = "InvariantViolation"


# --- geometry ---

class NonPositiveDepth(SemcorrError):
    code = "NonPositiveDepth"


class DegenerateEdge(SemcorrError):
    code = "DegenerateEdge"


class TooFewPoints(SemcorrError):
    code = "TooFewPoints"


# --- statistics ---

class TooFewSamples(SemcorrError):
    code = "TooFewSamples"


class NoValidQuadruples(SemcorrError):
    code = "NoValidQuadruples"


# --- optimization ---

class ShapeMismatch(SemcorrError):
    code = "ShapeMismatch"


class NonFiniteEnergy(SemcorrError):
    code = "NonFiniteEnergy"


# --- representation building ---

class InsufficientKeypoints(SemcorrError):
    code = "InsufficientKeypoints"


class PlacementFailed(SemcorrError):
    code = "PlacementFailed"


class EmptyMerge(SemcorrError):
    code = "EmptyMerge"


# --- alignment / correspondence ---

class NoSamples(SemcorrError):
    code = "NoSamples"


class BehindCamera(SemcorrError):
    code = "BehindCamera"


class AllRestartsDiverged(SemcorrError):
    code = "AllRestartsDiverged"


class AlignmentMissing(SemcorrError):
    code = "AlignmentMissing"


# --- evaluation ---

class CountMismatch(SemcorrError):
    code = "CountMismatch"


# --- synthetic generation ---

class ObjectBehindCamera(SemcorrError):
    code = "ObjectBehindCamera"
