"""Exception hierarchy.

``ValidationError`` covers bad inputs (CLI exit status 1); ``NumericalError``
and ``InvalidStateError`` cover failures at run time (CLI exit status 2).
"""


class GraphCamError(Exception):
    exit_code = 2


class ValidationError(GraphCamError, ValueError):
    exit_code = 1


class NumericalError(GraphCamError, ArithmeticError):
    exit_code = 2


class InvalidStateError(GraphCamError, RuntimeError):
    exit_code = 2


class DatasetError(ValidationError):
    """A dataset directory failed to load; ``location`` names the offending file or subject."""

    def __init__(self, message, location=None):
        super().__init__(message if location is None else f"{location}: {message}")
        self.location = location


class MissingFileError(DatasetError):
    pass


class DimensionError(DatasetError):
    pass


class NonFiniteError(DatasetError):
    pass


class UnknownLabelError(DatasetError):
    pass


class ModelFormatError(ValidationError):
    pass


class TrainingError(NumericalError):
    def __init__(self, message, step=None, run=None, fold=None):
        where = []
        if run is not None:
            where.append(f"run {run}")
        if fold is not None:
            where.append(f"fold {fold}")
        if step is not None:
            where.append(f"step {step}")
        prefix = f"[{', '.join(where)}] " if where else ""
        super().__init__(prefix + message)
        self.step = step
        self.run = run
        self.fold = fold
