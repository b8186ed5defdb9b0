"""TALUS: an SGX-like enclave CPU joined to a TPM 2.0-like device over a
locality-gated encrypted bus, with an executable adversary model."""

from .errors import (
    BusError,
    CryptoError,
    EnclaveError,
    FlowError,
    SecurityViolation,
    TalusError,
    TpmError,
)
from .flows import Platform, ScenarioRunner

__version__ = "0.1.0"

__all__ = [
    "BusError", "CryptoError", "EnclaveError", "FlowError", "Platform", "ScenarioRunner",
    "SecurityViolation", "TalusError", "TpmError",
]
