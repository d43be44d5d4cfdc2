"""Exception hierarchy shared across the package.

Every error that crosses a module boundary is defined here so callers
can catch by contract rather than by module. Errors raised and handled
within a single module stay local.
"""


class TeevaultError(Exception):
    """Base class for all package errors."""


# --- TEE simulation ---------------------------------------------------------

class InvalidProgram(TeevaultError):
    """Program bytes are empty or do not parse as a host program."""


class InvalidLimits(TeevaultError):
    """Enclave resource limits must be strictly positive."""


class InvalidReportData(TeevaultError):
    """Quote report data must be exactly 64 bytes."""


class MalformedQuote(TeevaultError):
    """Serialized quote has the wrong length or type."""


class SealIntegrityFailure(TeevaultError):
    """Sealed blob failed authentication: wrong device, wrong
    measurement, or tampered bytes."""


# --- Host program -----------------------------------------------------------

class StartupRefused(TeevaultError):
    """Host program refused to start (e.g. corrupted sealed keys)."""


class BackupFailed(TeevaultError):
    """Content snapshot could not be written; previous snapshot kept."""


class ChannelAuthFailure(TeevaultError):
    """Secure-channel handshake failed authentication."""


class ChannelClosed(TeevaultError):
    """Peer closed the connection."""


class BadFrame(TeevaultError):
    """Wire frame violates the framing or schema contract."""


# --- Vault daemon -----------------------------------------------------------

class AdvertiseFailed(TeevaultError):
    """VCHS onion name already registered."""


class SubmissionRejected(TeevaultError):
    """HP submission rejected (empty, oversize, or failed inspection)."""


class StartFailed(TeevaultError):
    """Service could not transition to Running."""


# --- Transport --------------------------------------------------------------

class Collision(TeevaultError):
    """Onion name already registered."""


class NotFound(TeevaultError):
    """Onion name not registered, or content path absent."""


class ConnectFailed(TeevaultError):
    """Endpoint did not accept the connection."""


class ProxyError(TeevaultError):
    """SOCKS5 proxy unreachable or refused the request."""


# --- Provider / client ------------------------------------------------------

class BootstrapError(TeevaultError):
    """Bootstrap aborted before completion; nothing sensitive sent."""


class QuoteMismatch(BootstrapError):
    """Quote failed verification against the expected measurement,
    attestation key, or report data."""


class AuthRejected(TeevaultError):
    """Service refused the authentication secret."""


class PartialFailure(TeevaultError):
    """Some content changes applied, others failed.

    Attributes:
        applied: list of paths whose change succeeded.
        failed: list of {"path", "reason"} dicts for changes that did not.
    """

    def __init__(self, applied, failed):
        self.applied = list(applied)
        self.failed = list(failed)
        super().__init__(
            f"{len(self.failed)} change(s) failed, {len(self.applied)} applied"
        )


class ImportRejected(TeevaultError):
    """Target HP lacks the key_import capability."""


class PinConflict(TeevaultError):
    """Advertisement conflicts with an existing pin for the same URL."""


class PinMismatch(TeevaultError):
    """Served certificate hash differs from the pinned hash."""


class PinMissing(TeevaultError):
    """No pin recorded for the requested onion URL."""


class FetchError(TeevaultError):
    """Fetch failed after the channel was established."""
