"""Scripted PPTP client (control connection + GRE + client PPP)."""

from __future__ import annotations

import selectors
import socket
import time
from typing import Optional

from .. import pptp
from ..core import Credentials, ProtocolId, Randomness
from ..net import close_quietly
from .policy import AbortedAt, ClientPolicy, Endpoint, Established
from .ppp_client import PppClient


class _Gre:
    def __init__(self, transport, call_id: int):
        self.t = transport
        self.peer_call_id: Optional[int] = None
        self.call_id = call_id
        self.seq = 0
        self.peer_seq: Optional[int] = None
        self.acked: Optional[int] = None

    def send(self, payload: bytes) -> None:
        ack = self.peer_seq if self.peer_seq != self.acked else None
        self.acked = self.peer_seq
        self.t.send(pptp.GrePacket(self.peer_call_id, self.seq, ack, payload).encode())
        self.seq += 1

    def ack(self) -> None:
        if self.peer_seq is not None and self.peer_seq != self.acked:
            self.acked = self.peer_seq
            self.t.send(pptp.GrePacket(self.peer_call_id, None, self.peer_seq).encode())


def run_pptp(policy: ClientPolicy, endpoint: Endpoint, credentials: Credentials, payload: bytes,
             rng: Optional[Randomness] = None, timeout: float = 10.0, linger: float = 0.3):
    rng = rng or Randomness()
    ctl = socket.create_connection(endpoint.address, timeout=timeout)
    call_id = rng.randint(1, 0xFFFE)
    gre_t = None
    try:
        buf = b""

        def expect(kind: int) -> pptp.ControlMessage:
            nonlocal buf
            while True:
                msg, buf = pptp.decode_control(buf)
                if msg is not None:
                    if msg.msg_type == kind:
                        return msg
                    continue
                chunk = ctl.recv(4096)
                if not chunk:
                    raise ConnectionError("server closed control connection")
                buf += chunk

        # the GRE socket must exist before the call opens; the server speaks first
        if endpoint.transport == "udp-sim":
            gre_t = pptp.UdpGreTransport(endpoint.host if endpoint.host != "0.0.0.0" else "127.0.0.1", 0,
                                         peer=endpoint.gre)
        else:
            gre_t = pptp.RawGreTransport("0.0.0.0", peer=(endpoint.host, 0))
            gre_t.local_call_id = call_id
        ctl.sendall(pptp.sccrq(b"simclient").encode())
        expect(pptp.SCCRP)
        ctl.sendall(pptp.ocrq(call_id).encode())
        reply = expect(pptp.OCRP)
        if reply.body[4] != pptp.RESULT_OK:
            return AbortedAt("PptpCall", "outgoing call refused")
        gre = _Gre(gre_t, call_id)
        gre.peer_call_id = reply.u16(0)

        client = PppClient(credentials, policy.inner_auth, policy.require_encryption, rng)
        for f in client.start():
            gre.send(f)

        sel = selectors.DefaultSelector()
        sel.register(gre_t, selectors.EVENT_READ, "gre")
        sel.register(ctl, selectors.EVENT_READ, "ctl")
        deadline = time.monotonic() + timeout
        sent_marker_at = None
        try:
            while time.monotonic() < deadline:
                for key, _ in sel.select(0.05):
                    if key.data == "ctl":
                        chunk = ctl.recv(4096)
                        if not chunk:
                            return _result(client, sent_marker_at, "control connection closed")
                        buf += chunk
                        while True:
                            msg, buf = pptp.decode_control(buf)
                            if msg is None:
                                break
                            if msg.msg_type == pptp.ECHO_REQUEST:
                                ctl.sendall(pptp.echo_reply(int.from_bytes(msg.body[:4], "big")).encode())
                            elif msg.msg_type in (pptp.CALL_DISCONNECT_NOTIFY, pptp.STOP_CCRQ):
                                return _result(client, sent_marker_at, "server cleared the call")
                        continue
                    data = gre_t.recv()
                    if data is None:
                        continue
                    pkt = pptp.GrePacket.decode(data)
                    if pkt.seq is not None:
                        gre.peer_seq = pkt.seq
                    if pkt.payload:
                        for f in client.receive(pkt.payload):
                            gre.send(f)
                        gre.ack()
                if client.aborted:
                    time.sleep(0.05)
                    _hang_up(ctl, gre.peer_call_id)
                    return AbortedAt(*client.aborted)
                if client.established and sent_marker_at is None:
                    gre.send(client.marker_frame(payload))
                    sent_marker_at = time.monotonic()
                if sent_marker_at is not None and time.monotonic() - sent_marker_at >= linger:
                    _hang_up(ctl, call_id)
                    return Established(ProtocolId.PPTP, client.encrypted,
                                       {"strength": client.strength, "local_ip": client.local_ip})
            return _result(client, sent_marker_at, "timed out")
        finally:
            sel.close()
    finally:
        close_quietly(ctl)
        if gre_t is not None:
            gre_t.close()


def _hang_up(ctl, call_id: int) -> None:
    try:
        ctl.sendall(pptp.call_clear_request(call_id).encode())
    except OSError:
        pass


def _result(client: PppClient, sent_marker_at, reason: str):
    if sent_marker_at is not None:
        return Established(ProtocolId.PPTP, client.encrypted, {"strength": client.strength})
    if client.aborted:
        return AbortedAt(*client.aborted)
    return AbortedAt(client.stage, reason)
