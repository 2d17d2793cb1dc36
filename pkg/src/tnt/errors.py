"""Exception types shared across the package."""


class TNTError(Exception):
    pass


class TotalMassRemoved(TNTError):
    """Every token carrying probability mass is in the negative set."""


class TargetNotPositive(TNTError):
    pass


class TokenOutOfRange(TNTError):
    pass


class NonFiniteLoss(TNTError):
    pass


class LengthMismatch(TNTError):
    pass


class EmptyDataset(TNTError):
    pass


class EmptyCorpus(TNTError):
    pass


class InvalidSpec(TNTError):
    pass


class NoQualifyingRun(TNTError):
    pass


class InfeasibleConstraint(TNTError):
    pass


class SpaceTooLarge(TNTError):
    pass


class ZeroOriginalMass(TNTError):
    pass


class ConfigError(TNTError):
    pass
