"""Exception types shared across the package."""


class RadicalcError(Exception):
    """Base class for all errors raised by this package."""


# --- IDS parsing ---

class UnexpectedEnd(RadicalcError):
    """Token stream ended while an operator still needed operands."""


class TrailingTokens(RadicalcError):
    """Tokens remain after a complete composition tree was consumed."""


class DepthExceeded(RadicalcError):
    """Composition tree nesting exceeds the sanity cap."""


class FileUnreadable(RadicalcError):
    """Input file could not be opened or decoded as UTF-8."""


class EmptyTable(RadicalcError):
    """Decomposition file yielded zero valid entries."""


# --- radical bank ---

class EmptyBank(RadicalcError):
    """Charset contains no CJK character, so no radical bank can be built."""


# --- numerics ---

class ShapeMismatch(RadicalcError):
    """Operands have incompatible shapes; message carries both shapes."""


class NonFiniteLoss(RadicalcError):
    """A loss or checked function produced NaN/Inf."""


# --- model ---

class IndexOutOfRange(RadicalcError):
    """Class id outside the embedding table."""


class DegenerateAttention(RadicalcError):
    """Attention map sums to zero; cannot fit a Gaussian to it."""


# --- evaluation ---

class EmptyInput(RadicalcError):
    """No evaluation pairs supplied."""


class DuplicateId(RadicalcError):
    """Sample id occurs more than once in an evaluation file."""
