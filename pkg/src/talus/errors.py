"""Exception types shared by the simulator.

Every failure carries a short machine-readable ``code`` (``"POLICY_FAIL"``,
``"REPLAY"``, ...) so that tests, the attack suite and the CLI can match on
it without parsing messages.
"""

from __future__ import annotations


class TalusError(Exception):
    """Base class; ``code`` names the failure path."""

    def __init__(self, code: str, message: str = ""):
        self.code = code
        super().__init__(f"{code}: {message}" if message else code)


class CryptoError(TalusError):
    pass


class TpmError(TalusError):
    pass


class BusError(TalusError):
    pass


class EnclaveError(TalusError):
    pass


class FlowError(TalusError):
    pass


class SecurityViolation(TalusError):
    """Raised when an attack that must fail has succeeded."""

    def __init__(self, message: str = ""):
        super().__init__("SECURITY_VIOLATION", message)
