"""Exception types raised across the package."""


class StedrError(Exception):
    """Base class for package errors."""


class InvalidArgument(StedrError, ValueError):
    pass


class InvalidConfig(StedrError, ValueError):
    pass


class NumericDomainError(StedrError, ArithmeticError):
    pass


class PositivityViolation(StedrError):
    """Treatment assignment is deterministic on the data at hand (one arm empty)."""


class TrainingDiverged(StedrError):
    def __init__(self, epoch, message="non-finite loss"):
        super().__init__(f"{message} at epoch {epoch}")
        self.epoch = epoch


class IneligibleDrug(StedrError):
    def __init__(self, drug, n_cases, minimum):
        super().__init__(f"drug {drug}: {n_cases} eligible cases < minimum {minimum}")
        self.drug = drug
        self.n_cases = n_cases
        self.minimum = minimum
