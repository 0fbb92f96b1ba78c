"""Error types shared by providers and clients.

Every provider-side failure carries a short machine-readable ``code`` that
travels on the wire, so the client can re-raise the same exception class.
"""


class SafeMailError(Exception):
    code = "error"


class ProviderError(SafeMailError):
    code = "provider"

    def __init__(self, message: str = ""):
        super().__init__(message or self.code)
        self.message = message or self.code


class AuthError(ProviderError):
    code = "auth"


class FreshnessError(ProviderError):
    code = "freshness"


class AlreadyRegistered(ProviderError):
    code = "already-registered"


class NotFound(ProviderError):
    code = "not-found"


class GrantInvalid(ProviderError):
    code = "grant-invalid"


class SizeError(ProviderError):
    code = "size"


class CollisionError(ProviderError):
    code = "collision"


class BadRequest(ProviderError):
    code = "bad-request"


class TransportError(SafeMailError, OSError):
    code = "transport"


_BY_CODE = {
    cls.code: cls
    for cls in (AuthError, FreshnessError, AlreadyRegistered, NotFound,
                GrantInvalid, SizeError, CollisionError, BadRequest)
}


def error_for_code(code: str, message: str = "") -> ProviderError:
    cls = _BY_CODE.get(code, ProviderError)
    return cls(message or code)
