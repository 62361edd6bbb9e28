"""Exception hierarchy shared by all dare modules."""


class DareError(Exception):
    """Base class for all errors raised by this package."""


# --- tensor / layer geometry ---

class ShapeMismatch(DareError):
    """Operand dimensions disagree (e.g. filter depth vs map depth)."""


class InvalidGeometry(DareError):
    """Layer geometry violates the exact output-size formula."""


# --- weight files ---

class WeightMismatch(DareError):
    """Stored weight shapes do not fit the target configuration."""


class CorruptFile(DareError):
    """Binary file fails magic, structure, or checksum validation."""


# --- tree topology ---

class TopologyError(DareError):
    """Base class for tree-topology validation failures."""


class CycleDetected(TopologyError):
    pass


class DuplicateLeaf(TopologyError):
    pass


class UncoveredLabel(TopologyError):
    pass


class ArityMismatch(TopologyError):
    pass


class DegenerateNode(DareError):
    """A classifier node has fewer than two non-empty branches to train on."""


class LengthMismatch(DareError):
    """Input vector length does not match what the model expects."""


# --- metrics ---

class LabelOutOfRange(DareError):
    pass


class EmptyMatrix(DareError):
    pass


class EmptyList(DareError):
    pass


class InvalidK(DareError):
    pass


# --- dataset ingestion ---

class ParseError(DareError):
    """Malformed manifest row; carries the 1-based line number."""

    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


class UnknownLabel(DareError):
    def __init__(self, line: int, label: str):
        super().__init__(f"line {line}: unknown label {label!r}")
        self.line = line
        self.label = label


class CountMismatch(DareError):
    pass


class UnsupportedFormat(DareError):
    pass


class CorruptHeader(DareError):
    pass


class TruncatedPayload(DareError):
    pass
