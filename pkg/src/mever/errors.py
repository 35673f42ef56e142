"""Exception types shared across the pipeline."""


class MeverError(Exception):
    """Base class for all pipeline errors."""


# --- corpus / datamodel ---

class CorpusError(MeverError):
    pass


class MissingFile(CorpusError):
    pass


class MalformedRecord(CorpusError):
    def __init__(self, path, line_no, message):
        super().__init__(f"{path}:{line_no}: {message}")
        self.path = str(path)
        self.line_no = line_no


class DanglingReference(CorpusError):
    def __init__(self, record_id, message):
        super().__init__(f"{record_id}: {message}")
        self.record_id = record_id


class CorpusValidationError(CorpusError):
    def __init__(self, report):
        lines = "; ".join(f"{rid}: {msg}" for rid, msg in report.errors[:8])
        more = "" if len(report.errors) <= 8 else f" (+{len(report.errors) - 8} more)"
        super().__init__(f"{len(report.errors)} validation error(s): {lines}{more}")
        self.report = report


class EmptyImagePool(CorpusError):
    pass


class TooFewClaims(CorpusError):
    pass


# --- encoder ---

class EmptyText(MeverError):
    pass


class ShapeMismatch(MeverError):
    pass


# --- retriever ---

class DimensionMismatch(MeverError):
    pass


class BatchTooSmall(MeverError):
    pass


class EmptyCorpus(MeverError):
    pass


class EmptyIndex(MeverError):
    pass


# --- verifier / explainer ---

class NoEvidence(MeverError):
    pass


class UnknownLabel(MeverError):
    pass


class OverLengthAfterTruncation(MeverError):
    pass


class EmptyGold(MeverError):
    pass


class EmptySequence(MeverError):
    pass


# --- trainer / persistence ---

class TrainingDiverged(MeverError):
    def __init__(self, message, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint


class MissingExplanations(MeverError):
    pass


class VersionMismatch(MeverError):
    pass


class CorruptFile(MeverError):
    pass


# --- evalkit ---

class LengthMismatch(MeverError):
    pass


class EmptyReference(MeverError):
    pass
