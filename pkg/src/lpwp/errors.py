"""Exception types shared across the package."""


class DataError(Exception):
    """Malformed or inconsistent input data (corpus files, predictions, mappings)."""


class GrammarError(DataError):
    """Mapping text that does not conform to the declaration grammar.

    Carries the byte offset of the offending token when known.
    """

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at offset {offset})"
        super().__init__(message)
        self.offset = offset
