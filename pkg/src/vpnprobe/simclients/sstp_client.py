"""Scripted SSTP client: HTTPS, SSTP control, client PPP and crypto binding."""

from __future__ import annotations

import socket
import ssl
import time
import uuid
from typing import Optional

from .. import auth, sstp, tlsutil
from ..core import Credentials, ProtocolId, Randomness
from ..net import close_quietly
from .policy import AbortedAt, CertCheck, ClientPolicy, Endpoint, Established, InnerAuth
from .ppp_client import PppClient


def run_sstp(policy: ClientPolicy, endpoint: Endpoint, credentials: Credentials, payload: bytes,
             rng: Optional[Randomness] = None, timeout: float = 10.0, linger: float = 0.3):
    rng = rng or Randomness()
    strict = policy.verify_server_cert is CertCheck.Strict
    raw = socket.create_connection(endpoint.address, timeout=timeout)
    ctx = tlsutil.client_context(verify=strict, ca_pem=endpoint.ca_pem)
    try:
        tls = ctx.wrap_socket(raw, server_hostname=endpoint.server_name)
    except (ssl.SSLError, OSError) as exc:
        close_quietly(raw)
        return AbortedAt("TlsVerify", str(exc))
    try:
        return _session(tls, policy, endpoint, credentials, payload, rng, timeout, linger)
    finally:
        close_quietly(tls)


def _session(tls, policy, endpoint, credentials, payload, rng, timeout, linger):
    corr = str(uuid.UUID(bytes=rng.bytes(16))).upper()
    tls.sendall(sstp.http_request(endpoint.server_name, corr))
    head, rest = sstp.read_http_head(tls)
    status = head.split(b"\r\n", 1)[0].split()
    if len(status) < 2 or status[1] != b"200":
        return AbortedAt("Http", head.split(b"\r\n", 1)[0].decode("latin-1"))
    reader = sstp.PacketReader(rest)
    tls.sendall(sstp.connect_request().encode())

    # SSTP only carries MS-CHAPv2 keys for the binding; TLS is the encryption
    inner = policy.inner_auth if policy.inner_auth is not InnerAuth.CHAP else InnerAuth.MSCHAPv2
    client = PppClient(credentials, inner, require_encryption=False, rng=rng, want_mppe=False)
    cert_der = tls.getpeercert(binary_form=True)
    nonce = None
    hash_alg = "SHA256"
    bound = False

    def send_ppp(frames):
        for f in frames:
            tls.sendall(sstp.encode_packet(False, f))

    tls.settimeout(0.05)
    deadline = time.monotonic() + timeout
    sent_marker_at = None
    while time.monotonic() < deadline:
        try:
            chunk = tls.recv(65535)
        except (socket.timeout, ssl.SSLWantReadError):
            chunk = None
        except (ssl.SSLError, OSError) as exc:
            return _result(client, sent_marker_at, f"connection error: {exc}")
        if chunk == b"":
            return _result(client, sent_marker_at, "server closed the connection")
        if chunk:
            reader.feed(chunk)
        while True:
            pkt = reader.pop()
            if pkt is None:
                break
            control, body, _ = pkt
            if control:
                msg = sstp.ControlMessage.decode(body)
                if msg.msg_type == sstp.MSG_CALL_CONNECT_ACK:
                    bitmask, nonce = sstp.parse_binding_request(msg)
                    hash_alg = "SHA256" if bitmask & sstp.HASH_SHA256 else "SHA1"
                    send_ppp(client.start())
                elif msg.msg_type == sstp.MSG_CALL_CONNECT_NAK:
                    return AbortedAt("SstpConnect", "server refused the call")
                elif msg.msg_type == sstp.MSG_ECHO_REQUEST:
                    tls.sendall(sstp.ControlMessage(sstp.MSG_ECHO_RESPONSE, []).encode())
                elif msg.msg_type in (sstp.MSG_CALL_DISCONNECT, sstp.MSG_CALL_ABORT):
                    return _result(client, sent_marker_at, "server disconnected")
                continue
            was_authenticated = client.authenticated
            out = client.receive(body)
            if client.authenticated and not was_authenticated and not bound:
                # Call-Connected must precede the NCP frames
                if nonce is None or client.nt_response is None:
                    return AbortedAt("SstpBinding", "no binding nonce or key material")
                keys = auth.derive_mppe_keys(credentials.password, client.nt_response, 128, is_server=False)
                binding = sstp.compute_binding(nonce, cert_der, sstp.hlak(keys, server_side=False), hash_alg)
                tls.sendall(binding.message())
                bound = True
            send_ppp(out)
        if client.aborted:
            _disconnect(tls)
            return AbortedAt(*client.aborted)
        if client.established and sent_marker_at is None:
            send_ppp([client.marker_frame(payload)])
            sent_marker_at = time.monotonic()
        if sent_marker_at is not None and time.monotonic() - sent_marker_at >= linger:
            _disconnect(tls)
            return Established(ProtocolId.SSTP, True, {"local_ip": client.local_ip, "binding": hash_alg})
    return _result(client, sent_marker_at, "timed out")


def _disconnect(tls) -> None:
    try:
        tls.sendall(sstp.ControlMessage(sstp.MSG_CALL_DISCONNECT, []).encode())
    except OSError:
        pass


def _result(client: PppClient, sent_marker_at, reason: str):
    if sent_marker_at is not None:
        return Established(ProtocolId.SSTP, True, {})
    if client.aborted:
        return AbortedAt(*client.aborted)
    return AbortedAt(client.stage, reason)
