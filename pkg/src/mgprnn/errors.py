"""Exception hierarchy shared by all modules."""


class MgpRnnError(Exception):
    """Base class for every error raised by the package."""


class ShapeError(MgpRnnError, ValueError):
    pass


class InvalidHyperparameterError(MgpRnnError, ValueError):
    pass


class InvalidInputError(MgpRnnError, ValueError):
    pass


class ConfigError(MgpRnnError, ValueError):
    pass


class DataError(MgpRnnError, ValueError):
    """Malformed or invalid cohort data."""


class MetricUndefinedError(MgpRnnError, ValueError):
    pass


class GenerationError(MgpRnnError):
    pass


class NumericalError(MgpRnnError, ArithmeticError):
    """A numerical routine failed (non-SPD operator, non-convergence, NaN).

    ``index`` is the batch position of the offending system when known and
    ``encounter_id`` is filled in by callers that know which encounter it was.
    """

    def __init__(self, message, index=None, encounter_id=None):
        super().__init__(message)
        self.index = index
        self.encounter_id = encounter_id


class TrainingError(NumericalError):
    pass
