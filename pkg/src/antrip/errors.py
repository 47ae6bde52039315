"""Exception types shared across the package."""


class DataError(ValueError):
    """Malformed or inconsistent input data (bad rows, unknown ids, tiny corpora)."""


class InfeasibleQueryError(DataError):
    """The query budget cannot even cover the stay at the start POI."""
