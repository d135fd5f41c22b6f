"""Minimal IPv4/UDP/ICMP builders for marker traffic inside tunnels."""

from __future__ import annotations

import ipaddress
import struct


def checksum(data: bytes) -> int:
    if len(data) % 2:
        data += b"\x00"
    s = sum(struct.unpack(f"!{len(data) // 2}H", data))
    while s >> 16:
        s = (s & 0xFFFF) + (s >> 16)
    return ~s & 0xFFFF


def ipv4(src: str, dst: str, proto: int, payload: bytes, ident: int = 0, ttl: int = 64) -> bytes:
    hdr = struct.pack("!BBHHHBBH4s4s", 0x45, 0, 20 + len(payload), ident, 0, ttl, proto, 0,
                      ipaddress.IPv4Address(src).packed, ipaddress.IPv4Address(dst).packed)
    hdr = hdr[:10] + struct.pack("!H", checksum(hdr)) + hdr[12:]
    return hdr + payload


def parse_ipv4(packet: bytes) -> tuple[str, str, int, bytes]:
    if len(packet) < 20 or packet[0] >> 4 != 4:
        raise ValueError("not an IPv4 packet")
    ihl = (packet[0] & 0x0F) * 4
    total = struct.unpack("!H", packet[2:4])[0]
    src = str(ipaddress.IPv4Address(packet[12:16]))
    dst = str(ipaddress.IPv4Address(packet[16:20]))
    return src, dst, packet[9], packet[ihl:total]


def udp_datagram(src: str, dst: str, sport: int, dport: int, payload: bytes) -> bytes:
    udp = struct.pack("!HHHH", sport, dport, 8 + len(payload), 0) + payload
    return ipv4(src, dst, 17, udp)


def icmp_echo(src: str, dst: str, ident: int, seq: int, payload: bytes, reply: bool = False) -> bytes:
    body = struct.pack("!BBHHH", 0 if reply else 8, 0, 0, ident, seq) + payload
    body = body[:2] + struct.pack("!H", checksum(body)) + body[4:]
    return ipv4(src, dst, 1, body)


def parse_icmp_echo(packet: bytes) -> tuple[str, str, int, int, int, bytes]:
    """(src, dst, type, ident, seq, payload) of an ICMP echo packet."""
    src, dst, proto, body = parse_ipv4(packet)
    if proto != 1 or len(body) < 8:
        raise ValueError("not an ICMP packet")
    typ, _code, _ck, ident, seq = struct.unpack("!BBHHH", body[:8])
    return src, dst, typ, ident, seq, body[8:]
