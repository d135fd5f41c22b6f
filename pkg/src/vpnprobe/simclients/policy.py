"""Client security posture and run outcomes shared by the simulated clients."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Optional, Union

from ..core import ProtocolId

ANY_IDENTITY = "%any"


class CertCheck(str, enum.Enum):
    Strict = "Strict"
    Ignore = "Ignore"


class InnerAuth(str, enum.Enum):
    PAP = "PAP"
    CHAP = "CHAP"
    MSCHAPv2 = "MSCHAPv2"


@dataclass(frozen=True)
class ClientPolicy:
    """One knob per vulnerability class it toggles.

    ``server_identity`` mirrors ipsec.conf ``rightid``: ``"%any"`` accepts
    any certified peer, anything else pins that name.
    """

    require_encryption: bool = True  # PPTP: refuse a link without MPPE
    verify_server_cert: CertCheck = CertCheck.Strict  # SSTP / SoftEther TLS
    server_identity: str = ANY_IDENTITY  # IKEv2
    psk: Optional[bytes] = None  # IKEv1; None means certificate authentication
    inner_auth: InnerAuth = InnerAuth.MSCHAPv2
    fallback_order: tuple[ProtocolId, ...] = ()
    retry_budget: int = 1

    def __post_init__(self):
        object.__setattr__(self, "verify_server_cert", CertCheck(self.verify_server_cert))
        object.__setattr__(self, "inner_auth", InnerAuth(self.inner_auth))
        object.__setattr__(self, "fallback_order", tuple(ProtocolId(p) for p in self.fallback_order))
        if isinstance(self.psk, str):
            object.__setattr__(self, "psk", self.psk.encode())
        if not self.server_identity:
            raise ValueError("a pinned server identity must be non-empty")
        if self.retry_budget < 1:
            raise ValueError("retry_budget must be at least 1")

    @property
    def pinned_identity(self) -> Optional[str]:
        return None if self.server_identity == ANY_IDENTITY else self.server_identity


@dataclass(frozen=True)
class Established:
    protocol: ProtocolId
    encrypted: bool
    detail: dict = field(default_factory=dict, compare=False)

    def __str__(self):
        return f"Established({self.protocol.value}, encrypted={self.encrypted})"


@dataclass(frozen=True)
class AbortedAt:
    stage: str
    reason: str = ""

    def __str__(self):
        return f"AbortedAt({self.stage}: {self.reason})" if self.reason else f"AbortedAt({self.stage})"


@dataclass(frozen=True)
class GaveUp:
    attempts: tuple = ()

    def __str__(self):
        return "GaveUp(" + ", ".join(str(a) for a in self.attempts) + ")"


ClientOutcome = Union[Established, AbortedAt, GaveUp]


@dataclass
class Endpoint:
    """Where a simclient connects.  ``gre`` is the UDP address carrying GRE
    in udp-sim mode; ``server_name`` is what the client expects to talk to."""

    host: str
    port: int
    transport: str = "udp-sim"
    gre: Optional[tuple[str, int]] = None
    server_name: str = "vpn.example.com"
    ca_pem: Optional[bytes] = None

    @property
    def address(self) -> tuple[str, int]:
        return (self.host, self.port)
