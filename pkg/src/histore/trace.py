"""Per-operation timing breakdown."""

from __future__ import annotations

from dataclasses import dataclass, field

PHASES = ("index_rpc", "queue_wait", "index_access", "log_sync", "data_access")


@dataclass
class PhaseTrace:
    index_rpc: float = 0.0
    queue_wait: float = 0.0
    index_access: float = 0.0
    log_sync: float = 0.0
    data_access: float = 0.0
    total: float = 0.0
    extra: dict = field(default_factory=dict)

    def add(self, phase: str, dt: float) -> None:
        setattr(self, phase, getattr(self, phase) + max(0.0, dt))

    def covered(self) -> float:
        return sum(getattr(self, p) for p in PHASES)

    def add_rpc(self, reply, phase: str = "index_rpc") -> None:
        """Split an RPC's elapsed time into server-reported phases and the rest."""
        server = 0.0
        for name, dt in reply.phases.items():
            if name in PHASES:
                self.add(name, dt)
                server += dt
        self.add(phase, reply.elapsed - server)

    def fractions(self) -> dict[str, float]:
        cov = self.covered()
        if cov <= 0:
            return {p: 0.0 for p in PHASES}
        return {p: getattr(self, p) / cov for p in PHASES}
