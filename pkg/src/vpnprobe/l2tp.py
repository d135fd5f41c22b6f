"""L2TPv2 control/data codec with a minimal LNS (server) and LAC (client).

Only what one tunnel with one incoming call needs: SCCRQ/SCCRP/SCCCN,
ICRQ/ICRP/ICCN, HELLO, StopCCN/CDN and data messages carrying PPP.
Sequence numbers are tracked; retransmission is not (the tunnel rides a
reliable loopback ESP path).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Callable, Optional

L2TP_PORT = 1701

T_BIT, L_BIT, S_BIT, O_BIT, P_BIT = 0x8000, 0x4000, 0x0800, 0x0200, 0x0100
VERSION = 2

SCCRQ, SCCRP, SCCCN, STOPCCN, HELLO = 1, 2, 3, 4, 6
ICRQ, ICRP, ICCN, CDN = 10, 11, 12, 14
ZLB = 0
MESSAGE_NAMES = {ZLB: "ZLB", SCCRQ: "SCCRQ", SCCRP: "SCCRP", SCCCN: "SCCCN", STOPCCN: "StopCCN", HELLO: "HELLO",
                 ICRQ: "ICRQ", ICRP: "ICRP", ICCN: "ICCN", CDN: "CDN"}

AVP_MESSAGE_TYPE = 0
AVP_RESULT_CODE = 1
AVP_PROTOCOL_VERSION = 2
AVP_FRAMING_CAPS = 3
AVP_HOST_NAME = 7
AVP_ASSIGNED_TUNNEL = 9
AVP_RECV_WINDOW = 10
AVP_ASSIGNED_SESSION = 14
AVP_CALL_SERIAL = 15
AVP_FRAMING_TYPE = 19
AVP_TX_SPEED = 24


class L2tpError(ValueError):
    pass


@dataclass
class L2tpMessage:
    control: bool
    tunnel_id: int
    session_id: int
    ns: int = 0
    nr: int = 0
    avps: list = field(default_factory=list)  # (attr, value bytes, mandatory)
    payload: bytes = b""

    @property
    def msg_type(self) -> int:
        if not self.control:
            raise L2tpError("data messages have no type")
        for attr, value, _ in self.avps:
            if attr == AVP_MESSAGE_TYPE:
                return struct.unpack("!H", value)[0]
        return ZLB

    @property
    def name(self) -> str:
        if not self.control:
            return "data"
        return MESSAGE_NAMES.get(self.msg_type, f"type-{self.msg_type}")

    def avp(self, attr: int) -> Optional[bytes]:
        return next((v for a, v, _ in self.avps if a == attr), None)

    def encode(self) -> bytes:
        if self.control:
            body = b"".join(struct.pack("!HHH", (0x8000 if m else 0) | (6 + len(v)), 0, a) + v
                            for a, v, m in self.avps)
            length = 12 + len(body)
            return struct.pack("!HHHHHH", T_BIT | L_BIT | S_BIT | VERSION, length, self.tunnel_id,
                               self.session_id, self.ns, self.nr) + body
        return struct.pack("!HHH", VERSION, self.tunnel_id, self.session_id) + self.payload

    @classmethod
    def decode(cls, data: bytes) -> "L2tpMessage":
        if len(data) < 6:
            raise L2tpError("L2TP header truncated")
        flags = struct.unpack("!H", data[:2])[0]
        if flags & 0x000F != VERSION:
            raise L2tpError(f"unsupported L2TP version {flags & 0xF}")
        off = 2
        length = None
        if flags & L_BIT:
            length = struct.unpack("!H", data[off:off + 2])[0]
            off += 2
        if len(data) < off + 4:
            raise L2tpError("L2TP header truncated")
        tid, sid = struct.unpack("!HH", data[off:off + 4])
        off += 4
        ns = nr = 0
        if flags & S_BIT:
            if len(data) < off + 4:
                raise L2tpError("L2TP sequence fields truncated")
            ns, nr = struct.unpack("!HH", data[off:off + 4])
            off += 4
        if flags & O_BIT:
            pad = struct.unpack("!H", data[off:off + 2])[0]
            off += 2 + pad
        end = length if length is not None else len(data)
        if end > len(data) or off > end:
            raise L2tpError("L2TP length field exceeds datagram")
        if not flags & T_BIT:
            return cls(False, tid, sid, ns, nr, payload=data[off:end])
        if not (flags & L_BIT and flags & S_BIT):
            raise L2tpError("control message without length/sequence fields")
        avps = []
        while off < end:
            if off + 6 > end:
                raise L2tpError("AVP header truncated")
            hdr, vendor, attr = struct.unpack("!HHH", data[off:off + 6])
            alen = hdr & 0x03FF
            if alen < 6 or off + alen > end:
                raise L2tpError(f"AVP {attr} length {alen} invalid")
            if hdr & 0x4000:
                raise L2tpError("hidden AVPs are not supported")
            if vendor == 0:
                avps.append((attr, data[off + 6:off + alen], bool(hdr & 0x8000)))
            off += alen
        if avps and avps[0][0] != AVP_MESSAGE_TYPE:
            raise L2tpError("first AVP is not Message Type")
        return cls(True, tid, sid, ns, nr, avps)


def u16(v: int) -> bytes:
    return struct.pack("!H", v)


def u32(v: int) -> bytes:
    return struct.pack("!I", v)


def _control(msg_type: int, avps: list) -> list:
    return [(AVP_MESSAGE_TYPE, u16(msg_type), True)] + avps


class _Endpoint:
    """Shared Ns/Nr bookkeeping."""

    def __init__(self):
        self.ns = 0
        self.nr = 0
        self.peer_tunnel = 0
        self.peer_session = 0
        self.local_tunnel = 0
        self.local_session = 0

    def control(self, msg_type: int, avps: list, session: bool = False) -> bytes:
        m = L2tpMessage(True, self.peer_tunnel, self.peer_session if session else 0, self.ns, self.nr,
                        _control(msg_type, avps))
        self.ns = (self.ns + 1) & 0xFFFF
        return m.encode()

    def zlb(self) -> bytes:
        return L2tpMessage(True, self.peer_tunnel, 0, self.ns, self.nr).encode()

    def data(self, ppp_frame: bytes) -> bytes:
        return L2tpMessage(False, self.peer_tunnel, self.peer_session, payload=ppp_frame).encode()

    def accept(self, msg: L2tpMessage) -> bool:
        """Advance Nr for an in-order control message; False for duplicates/ZLB."""
        if not msg.control or msg.msg_type == ZLB:
            return False
        if msg.ns != self.nr:
            return False
        self.nr = (self.nr + 1) & 0xFFFF
        return True


class L2tpLns(_Endpoint):
    """Server side.  ``on_session`` is called once the call is connected and
    returns the frames the server's PPP sends first; ``on_ppp`` handles each
    PPP frame received and returns PPP frames to send back."""

    def __init__(self, rng, on_session: Callable[[], list], on_ppp: Callable[[bytes], list],
                 on_event: Optional[Callable[[str, L2tpMessage], None]] = None, host_name: bytes = b"lns"):
        super().__init__()
        self.local_tunnel = rng.randint(1, 0xFFFF)
        self.local_session = rng.randint(1, 0xFFFF)
        self.on_session, self.on_ppp = on_session, on_ppp
        self.on_event = on_event or (lambda what, msg: None)
        self.host_name = host_name
        self.state = "Idle"
        self.closed = False

    def receive(self, data: bytes) -> list[bytes]:
        msg = L2tpMessage.decode(data)
        if not msg.control:
            if self.state != "Established" or msg.session_id != self.local_session:
                return []
            return [self.data(f) for f in self.on_ppp(msg.payload)]
        fresh = self.accept(msg)
        self.on_event(msg.name, msg)
        if not fresh:
            return []
        t = msg.msg_type
        if t == SCCRQ:
            tid = msg.avp(AVP_ASSIGNED_TUNNEL)
            if tid is None:
                raise L2tpError("SCCRQ without Assigned Tunnel ID")
            self.peer_tunnel = struct.unpack("!H", tid)[0]
            self.state = "WaitCtlConn"
            return [self.control(SCCRP, [(AVP_PROTOCOL_VERSION, b"\x01\x00", True),
                                         (AVP_FRAMING_CAPS, u32(3), True), (AVP_HOST_NAME, self.host_name, True),
                                         (AVP_ASSIGNED_TUNNEL, u16(self.local_tunnel), True),
                                         (AVP_RECV_WINDOW, u16(4), False)])]
        if t == SCCCN:
            self.state = "TunnelUp"
            return [self.zlb()]
        if t == ICRQ:
            sid = msg.avp(AVP_ASSIGNED_SESSION)
            if sid is None:
                raise L2tpError("ICRQ without Assigned Session ID")
            self.peer_session = struct.unpack("!H", sid)[0]
            self.state = "WaitConnect"
            return [self.control(ICRP, [(AVP_ASSIGNED_SESSION, u16(self.local_session), True)], session=True)]
        if t == ICCN:
            self.state = "Established"
            return [self.zlb()] + [self.data(f) for f in self.on_session()]
        if t in (CDN, STOPCCN):
            self.closed = True
            return [self.zlb()]
        return [self.zlb()]


class L2tpLac(_Endpoint):
    """Client side.  ``on_session`` fires when ICCN has been sent; PPP frames
    received are handed to ``on_ppp``."""

    def __init__(self, rng, on_session: Callable[[], list], on_ppp: Callable[[bytes], list],
                 host_name: bytes = b"lac"):
        super().__init__()
        self.local_tunnel = rng.randint(1, 0xFFFF)
        self.local_session = rng.randint(1, 0xFFFF)
        self.serial = rng.randint(1, 0xFFFF)
        self.on_session, self.on_ppp = on_session, on_ppp
        self.host_name = host_name
        self.state = "Idle"
        self.closed = False

    def start(self) -> list[bytes]:
        self.state = "WaitCtlReply"
        return [self.control(SCCRQ, [(AVP_PROTOCOL_VERSION, b"\x01\x00", True), (AVP_FRAMING_CAPS, u32(3), True),
                                     (AVP_HOST_NAME, self.host_name, True),
                                     (AVP_ASSIGNED_TUNNEL, u16(self.local_tunnel), True)])]

    def receive(self, data: bytes) -> list[bytes]:
        msg = L2tpMessage.decode(data)
        if not msg.control:
            if self.state != "Established":
                return []
            return [self.data(f) for f in self.on_ppp(msg.payload)]
        if not self.accept(msg):
            return []
        t = msg.msg_type
        if t == SCCRP:
            tid = msg.avp(AVP_ASSIGNED_TUNNEL)
            if tid is None:
                raise L2tpError("SCCRP without Assigned Tunnel ID")
            self.peer_tunnel = struct.unpack("!H", tid)[0]
            self.state = "WaitReply"
            return [self.control(SCCCN, []),
                    self.control(ICRQ, [(AVP_ASSIGNED_SESSION, u16(self.local_session), True),
                                        (AVP_CALL_SERIAL, u32(self.serial), True)])]
        if t == ICRP:
            sid = msg.avp(AVP_ASSIGNED_SESSION)
            if sid is None:
                raise L2tpError("ICRP without Assigned Session ID")
            self.peer_session = struct.unpack("!H", sid)[0]
            self.state = "Established"
            out = [self.control(ICCN, [(AVP_TX_SPEED, u32(100000000), True), (AVP_FRAMING_TYPE, u32(1), True)],
                                session=True)]
            return out + [self.data(f) for f in self.on_session()]
        if t in (CDN, STOPCCN):
            self.closed = True
        return [self.zlb()]

    def hang_up(self) -> list[bytes]:
        self.closed = True
        return [self.control(CDN, [(AVP_RESULT_CODE, u16(3), True),
                                   (AVP_ASSIGNED_SESSION, u16(self.local_session), True)], session=True),
                self.control(STOPCCN, [(AVP_ASSIGNED_TUNNEL, u16(self.local_tunnel), True),
                                       (AVP_RESULT_CODE, u16(1), True)])]
