"""
Domain Exceptions
Error hierarchy shared by the engines and mapped to CLI exit codes
"""

from typing import Any, Optional


class EmsError(Exception):
    """Base class for every error raised by the simulator"""

    exit_code = 1

    def __init__(self, message: str, **context: Any):
        super().__init__(message)
        self.message = message
        self.context = context

    def to_dict(self) -> dict:
        """Convert to dictionary for logs and report rows"""
        return {
            "error": type(self).__name__,
            "message": self.message,
            **{k: v for k, v in self.context.items() if isinstance(v, (int, float, str))},
        }


# Input errors (exit code 3)

class InputError(EmsError):
    """Raised when an argument, file or record is malformed"""

    exit_code = 3


class ConfigurationError(InputError):
    """Raised when the parameter file or environment is invalid"""


class DatasetError(InputError):
    """Raised when a dataset is empty or cannot provide training windows"""


class ModelFormatError(InputError):
    """Raised when a predictor weight file has the wrong header or shapes"""


# Infeasibility (exit code 2)

class InfeasibleError(EmsError):
    """Raised when the physics or the constraints admit no solution"""

    exit_code = 2


class InfeasiblePowerError(InfeasibleError):
    """Battery power exceeds what the open-circuit voltage can deliver"""


class BoundViolationError(InfeasibleError):
    """SOC left the admissible window"""


class EnvelopeError(InfeasibleError):
    """Torque, speed or power outside the engine/generator envelope"""


class DpInfeasibleError(InfeasibleError):
    """No lattice path reaches an admissible terminal node"""

    def __init__(self, message: str, stage: Optional[int] = None, **context: Any):
        super().__init__(message, stage=stage, **context)
        self.stage = stage


class SimulationBoundError(InfeasibleError):
    """Closed-loop simulation stopped on a battery bound; carries the partial log"""

    def __init__(self, message: str, partial_log: Any = None, **context: Any):
        super().__init__(message, **context)
        self.partial_log = partial_log


class ConvergenceError(EmsError):
    """Iterative procedure did not settle"""

    exit_code = 2

    def __init__(self, message: str, last_value: Any = None, **context: Any):
        super().__init__(message, **context)
        self.last_value = last_value
