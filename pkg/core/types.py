"""
Shared types for the federated simulator.
Separated to avoid circular imports between modules.
"""
from enum import Enum
from typing import Optional


class Algorithm(Enum):
    """Local-training / aggregation variants run by the federation engine."""
    LOCAL_ONLY = "local_only"   # Each center trains alone, no server
    FEDAVG = "fedavg"           # Supervised loss + size-weighted averaging
    FEDPROX = "fedprox"         # FedAvg plus proximal penalty toward w^g
    FL_BT = "fl_bt"             # Supervised loss + Barlow Twins model contrast


class Pretext(Enum):
    """Which self-supervised pretext losses drive pretraining."""
    BOTH = "both"   # L_CE + L_MSE
    CE = "ce"       # source-center classification only
    MSE = "mse"     # patch-swap restoration only


class ViewMode(Enum):
    """Inputs of the contrastive branch in FL-BT local training."""
    SAME = "same"               # local and global model see the same batch
    AUGMENTED = "augmented"     # each model sees its own random dihedral view


class Segment(Enum):
    """Named parameter segments of a model; the value is the entry-name prefix."""
    ENCODER = "encoder"
    PROJECTOR = "projector"
    HEAD = "head"
    SSL_CENTER = "ssl_center"
    SSL_RESTORE = "ssl_restore"


# =============================================================================
# ERRORS
# =============================================================================

class SimulatorError(Exception):
    """Base class for every error the simulator raises on purpose."""
    exit_code = 4


class StructuralError(SimulatorError):
    """Shapes or entry names do not line up."""


class NumericError(SimulatorError):
    """A non-finite value appeared in a computation."""


class ContractError(SimulatorError):
    """A documented precondition was violated by the caller."""


class ConfigError(SimulatorError):
    """The experiment configuration is invalid."""
    exit_code = 2


class DataError(SimulatorError):
    """Dataset archives are missing, corrupt or leak real images."""
    exit_code = 3


class ClientError(SimulatorError):
    """A client failed during local training; the round is aborted."""

    def __init__(self, center_id: int, cause: BaseException):
        super().__init__(f"client {center_id} failed: {cause}")
        self.center_id = center_id
        self.cause = cause
        if isinstance(cause, SimulatorError):
            self.exit_code = cause.exit_code


class ValidationError:
    """Represents a validation finding with severity and the config field it concerns."""
    def __init__(self, severity: str, message: str, location: Optional[str] = None):
        self.severity = severity  # "error", "warning", "info"
        self.message = message
        self.location = location

    def __str__(self):
        loc_str = f" at {self.location}" if self.location else ""
        return f"{self.severity.upper()}: {self.message}{loc_str}"
