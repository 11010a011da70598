"""Exception hierarchy.

Every error carries the name of the module that raised it and a stable
code, so the CLI can report failures uniformly and map them to exit
statuses (3 for data problems, 4 for numerical/identifiability problems).
"""


class IVSubdistError(Exception):
    exit_status = 1
    code = "E000"
    module = "ivsubdist"

    def __init__(self, message, *, module=None):
        super().__init__(message)
        if module is not None:
            self.module = module

    def describe(self):
        return f"[{self.module}:{self.code}] {self}"


class DataError(IVSubdistError):
    """Malformed or invalid input data."""

    exit_status = 3
    code = "D100"
    module = "data_model"


class MalformedRowError(DataError):
    code = "D101"

    def __init__(self, message, *, row=None, column=None):
        super().__init__(message)
        self.row = row
        self.column = column


class EmptyDatasetError(DataError):
    code = "D102"


class ArtifactError(DataError):
    code = "D200"
    module = "cli_io"


class DigestMismatchError(ArtifactError):
    code = "D201"


class NumericalError(IVSubdistError):
    """A computation is numerically undefined for this data."""

    exit_status = 4
    code = "N100"


class CensoringError(NumericalError):
    code = "N110"
    module = "censoring_ipcw"


class SingularDesignError(NumericalError):
    code = "N120"
    module = "first_stage"

    def __init__(self, message, *, column=None):
        super().__init__(message)
        self.column = column


class IdentifiabilityError(NumericalError):
    code = "N130"
    module = "additive_fit"


class RiskSetError(NumericalError):
    code = "N140"
    module = "additive_fit"


class SimulationError(NumericalError):
    code = "N150"
    module = "sim_engine"
