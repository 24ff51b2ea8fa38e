"""Exception types shared by every layer of the store."""


class HiStoreError(Exception):
    pass


class ConfigError(HiStoreError, ValueError):
    pass


class CorruptItem(HiStoreError):
    """A stored item did not parse to the length the index claimed."""


class GroupUnavailable(HiStoreError):
    pass


class ScanUnavailable(GroupUnavailable):
    pass


# -- transport level ---------------------------------------------------------


class TransportError(HiStoreError):
    pass


class RpcTimeout(TransportError, TimeoutError):
    pass


class MemoryFault(TransportError):
    pass


class UnknownNode(TransportError):
    pass


class OutOfMemory(TransportError):
    pass


class NodeDown(TransportError):
    """Raised inside an actor whose own node has crashed."""


# -- errors raised by RPC handlers and shipped back to the caller -----------

_RPC_ERRORS: dict[str, type] = {}


class RpcError(HiStoreError):
    code = "error"

    def __init__(self, message: str = "", **data):
        super().__init__(message)
        self.message = message
        self.data = data

    def __init_subclass__(cls, **kw):
        super().__init_subclass__(**kw)
        _RPC_ERRORS[cls.code] = cls

    @staticmethod
    def rebuild(code: str, message: str, data: dict) -> "RpcError":
        cls = _RPC_ERRORS.get(code, RpcError)
        err = cls(message, **data)
        return err


_RPC_ERRORS["error"] = RpcError


class UnknownEndpoint(RpcError):
    code = "unknown_endpoint"


class NotPrimary(RpcError):
    code = "not_primary"


class StaleEpoch(RpcError):
    code = "stale_epoch"


class Redirect(RpcError):
    """The node is rebuilding; ``data['sibling']`` names a node that can answer."""

    code = "redirect"


class WriteNotAcked(RpcError):
    code = "write_not_acked"


class WritePaused(RpcError):
    code = "write_paused"


class Unsupported(RpcError):
    code = "unsupported"


class LogGap(RpcError):
    code = "log_gap"


class BadRequest(RpcError):
    code = "bad_request"
