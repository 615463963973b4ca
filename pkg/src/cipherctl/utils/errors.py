"""Exception hierarchy for cipherctl."""


class CipherCtlError(Exception):
    """Base class for all errors raised by cipherctl."""


class DimensionError(CipherCtlError, ValueError):
    """Shapes or dimensions do not agree."""


class ConfigError(CipherCtlError):
    """Invalid or infeasible run configuration."""


class DefinitenessError(CipherCtlError):
    """Schur complement is not positive (lambda_g too small or corrupted inverse)."""

    def __init__(self, s: float, step: int | None = None):
        self.s = s
        self.step = step
        where = f" at step {step}" if step is not None else ""
        super().__init__(f"Schur complement s={s:.6g} is not positive{where}")


class RankError(CipherCtlError):
    """Rank detection or contraction precondition failure."""


class RingError(CipherCtlError):
    """Polynomial ring misuse: moduli or representation mismatch, prime search failure."""


class EncodingError(CipherCtlError):
    """Slot overflow or scaled coefficients beyond the modulus budget."""


class ScaleError(CipherCtlError):
    """Operands carry incompatible scales or an unsupported depth."""


class BudgetExhaustedError(CipherCtlError):
    """No modulus left to rescale or mask; the ciphertext needs a refresh."""

    refresh_hint = "request a client refresh of the ciphertext"


class KeyMissingError(CipherCtlError, KeyError):
    """A rotation key for the requested index was not generated."""


class FootprintError(CipherCtlError):
    """Slot footprint or junk-free rotation budget exceeded."""


class LedgerError(CipherCtlError):
    """Ciphertext depth drifted from the declared depth ledger."""


class ProtocolError(CipherCtlError):
    """Protocol state machine misuse, client abort, or privacy-structure violation."""
