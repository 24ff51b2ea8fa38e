from histore.transport.base import US, CostModel, MemRegion, NetConfig, Reply, TransportCounters
from histore.transport.sim import Port, RpcContext, SimTransport

__all__ = ["US", "CostModel", "MemRegion", "NetConfig", "Reply", "TransportCounters",
           "Port", "RpcContext", "SimTransport"]
