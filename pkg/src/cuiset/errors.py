"""Exception types shared across the package."""


class CuisetError(Exception):
    """Base class for all package-specific errors."""


class CorruptIndexError(CuisetError):
    """Vector index file failed checksum, magic, or version validation."""


class CorruptSnapshotError(CuisetError):
    """Graph snapshot file is malformed or from an unknown version."""


class EmptyResultError(CuisetError):
    """Retrieval produced no candidates (e.g. semantic types admit no node)."""


class SchemaValidationError(CuisetError):
    """Model reply is not valid JSON of the required shape."""


class ClassConflictError(SchemaValidationError):
    """A CUI was assigned to both classification classes."""


class OutOfUniverseError(SchemaValidationError):
    """Reply contained CUIs outside the allowed candidate universe."""


class UndefinedMetricError(CuisetError):
    """A metric's denominator is empty; the value is undefined, not zero."""


class StageDependencyError(CuisetError):
    """A pipeline stage's upstream artifact is missing."""

    def __init__(self, stage: str, missing: str):
        super().__init__(f"stage '{stage}' requires missing artifact: {missing}")
        self.stage = stage
        self.missing = missing


class IncompleteAdjudicationError(CuisetError):
    """Adjudication submitted without resolving every disagreement."""

    def __init__(self, unresolved: list[str]):
        super().__init__(
            "unresolved disagreements: " + ", ".join(sorted(unresolved))
        )
        self.unresolved = sorted(unresolved)


class ProviderError(CuisetError):
    """Remote embedding/chat provider failed after retries."""
