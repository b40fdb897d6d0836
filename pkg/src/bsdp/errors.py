"""Exception hierarchy shared by all pipeline stages."""


class BSDPError(Exception):
    """Base class. ``module`` names the stage that raised it."""

    module = "bsdp"


class InvalidInputError(BSDPError, ValueError):
    module = "geo"


class RecordError(BSDPError, ValueError):
    """A malformed trajectory row."""

    module = "ingest"

    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line
        self.reason = message


class ConfigError(BSDPError, ValueError):
    module = "config"


class ContractError(BSDPError, ValueError):
    """Shape, codec or precondition violation between stages."""

    module = "contract"


class NumericalError(BSDPError, ArithmeticError):
    module = "ggnn"

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step


class TrainingError(BSDPError, RuntimeError):
    module = "ggnn"

    def __init__(self, message: str, epoch: int):
        super().__init__(f"{message} (epoch {epoch})")
        self.epoch = epoch
