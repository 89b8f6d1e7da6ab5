"""Exception hierarchy shared by all crystal_ebm modules."""


class CrystalEBMError(Exception):
    """Base class for every error raised by this package."""


class DegenerateLattice(CrystalEBMError):
    pass


class EmptySpecies(CrystalEBMError):
    pass


class InvalidMultiplier(CrystalEBMError):
    pass


class ReductionFailed(CrystalEBMError):
    pass


class SingularTransform(CrystalEBMError):
    pass


class NonFiniteEnergy(CrystalEBMError):
    pass


class NonFiniteGradient(CrystalEBMError):
    pass


class InitFailed(CrystalEBMError):
    pass


class ConfigError(CrystalEBMError, ValueError):
    """Invalid or unknown configuration value."""


class UnknownElement(CrystalEBMError, ValueError):
    def __init__(self, symbol, line=None):
        where = f"line {line}: " if line is not None else ""
        super().__init__(f"{where}unknown element symbol {symbol!r}")
        self.symbol = symbol
        self.line = line


class ParseError(CrystalEBMError):
    def __init__(self, line, reason):
        super().__init__(f"line {line}: {reason}")
        self.line = line
        self.reason = reason


class ValidationError(CrystalEBMError):
    def __init__(self, line, reason):
        super().__init__(f"line {line}: {reason}")
        self.line = line
        self.reason = reason


class VersionMismatch(CrystalEBMError):
    pass


class ShapeMismatch(CrystalEBMError):
    pass


class CorruptFile(CrystalEBMError):
    pass


class TrainingDiverged(CrystalEBMError):
    """Too many batches produced non-finite energies or gradients."""
