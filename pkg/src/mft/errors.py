"""Exception hierarchy shared by every service and agent.

Each error carries a machine-readable ``code`` (the ApiError code on the
wire), an HTTP ``status`` used by the API layer, and a ``retryable`` hint.
"""


class MFTError(Exception):
    code = "InternalError"
    status = 500
    retryable = False

    def __init__(self, message: str = "", **details):
        super().__init__(message or self.code)
        self.message = message or self.code
        self.details = details

    def to_dict(self) -> dict:
        return {"code": self.code, "message": self.message, "retryable": self.retryable}

    @classmethod
    def from_dict(cls, data: dict) -> "MFTError":
        err_cls = _REGISTRY.get(data.get("code", ""), MFTError)
        err = err_cls(data.get("message", ""))
        if err_cls is MFTError:
            err.code = data.get("code", "InternalError")
            err.retryable = bool(data.get("retryable", False))
        return err


_REGISTRY: dict[str, type] = {}


def _define(name: str, status: int, base=MFTError, retryable: bool = False) -> type:
    cls = type(name, (base,), {"code": name, "status": status, "retryable": retryable})
    _REGISTRY[name] = cls
    return cls


# request validation
ValidationError = _define("ValidationError", 400)
EmptyPath = _define("EmptyPath", 400, ValidationError)
PathEscapesRoot = _define("PathEscapesRoot", 400, ValidationError)
SameSourceAndDestination = _define("SameSourceAndDestination", 400, ValidationError)
ChunkSizeOutOfRange = _define("ChunkSizeOutOfRange", 400, ValidationError)
MalformedRequest = _define("MalformedRequest", 400, ValidationError)

# lifecycle / planning
NoAgentPath = _define("NoAgentPath", 409)
IllegalTransition = _define("IllegalTransition", 409)
TerminalStateImmutable = _define("TerminalStateImmutable", 409)

# tokens
TtlOutOfRange = _define("TtlOutOfRange", 400)

# connectors
ConnectorError = _define("ConnectorError", 502)
UnknownKind = _define("UnknownKind", 400, ConnectorError)
MissingCredential = _define("MissingCredential", 400, ConnectorError)
BadBaseLocator = _define("BadBaseLocator", 400, ConnectorError)
PermissionDenied = _define("PermissionDenied", 403, ConnectorError)
Unreachable = _define("Unreachable", 503, ConnectorError, retryable=True)
NotFound = _define("NotFound", 404, ConnectorError)
RangeBeyondEnd = _define("RangeBeyondEnd", 416, ConnectorError)
CapabilityMissing = _define("CapabilityMissing", 400, ConnectorError)
OffsetMismatch = _define("OffsetMismatch", 409, ConnectorError)
DigestMismatch = _define("DigestMismatch", 412, ConnectorError, retryable=True)
NoStagedData = _define("NoStagedData", 409, ConnectorError)
StorageFull = _define("StorageFull", 507, ConnectorError, retryable=True)

# backends
DuplicateEndpointId = _define("DuplicateEndpointId", 409)
DuplicateCredentialId = _define("DuplicateCredentialId", 409)
UnknownEndpoint = _define("UnknownEndpoint", 404)
UnknownCredential = _define("UnknownCredential", 404)
UnknownGrant = _define("UnknownGrant", 404)
GrantExpired = _define("GrantExpired", 403)
Unauthorized = _define("Unauthorized", 401)
CorruptStore = _define("CorruptStore", 500)
WrongMasterKey = _define("WrongMasterKey", 500)
UnsupportedVersion = _define("UnsupportedVersion", 500)
InUse = _define("InUse", 409)
ObjectExists = _define("ObjectExists", 409)

# controller / api
UnknownTransfer = _define("UnknownTransfer", 404)
UnknownAgent = _define("UnknownAgent", 404)
AlreadyTerminal = _define("AlreadyTerminal", 409)
NoLiveAgent = _define("NoLiveAgent", 409)

# agent / data channel
GrantRedemptionFailed = _define("GrantRedemptionFailed", 502, retryable=True)
SourceVanished = _define("SourceVanished", 404)
RemoteRejected = _define("RemoteRejected", 502, retryable=True)
RetriesExhausted = _define("RetriesExhausted", 503, retryable=True)
Canceled = _define("Canceled", 409)

# harness
ScenarioInvalid = _define("ScenarioInvalid", 400)
HarnessTimeout = _define("HarnessTimeout", 504)
UnknownTarget = _define("UnknownTarget", 400)
