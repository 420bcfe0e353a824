"""Bit-exact encode/decode of Ethernet/IPv4/TCP/UDP/ICMP headers plus
structural ("grammar") validation.

Decoding is total for any frame of at least 14 bytes: inner layers that are
truncated or nonsensical leave the corresponding attribute ``None`` and are
reported as anomalies by :func:`validate_packet`, never as decode errors.
Encoding rebuilds the frame purely from structured fields (the ``raw`` bytes
kept on :class:`Packet` are not consulted), so ``encode(decode(f)) == f`` is a
tested property rather than a tautology.

Malformed-frame conventions (chosen so corrupt frames still round-trip):
  * ``ihl < 5``: the fixed 20 header bytes are still decoded, options are
    empty, and the transport layer is parsed at offset 20.
  * options regions shorter than ``(ihl-5)*4`` (or the TCP equivalent) are
    carried as-is; the shortfall surfaces as ``TRUNCATED_HEADER``.

Every operation here is a pure function of its inputs; there is no shared
mutable state, so any number of workers may decode/encode/validate
concurrently.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from enum import Enum

ETHERTYPE_IPV4 = 0x0800

PROTO_ICMP = 1
PROTO_TCP = 6
PROTO_UDP = 17

# TCP flag bits, wire order CWR..FIN within byte 13.
TCP_FIN = 0x01
TCP_SYN = 0x02
TCP_RST = 0x04
TCP_PSH = 0x08
TCP_ACK = 0x10
TCP_URG = 0x20
TCP_ECE = 0x40
TCP_CWR = 0x80

# IPv4 flag bits within the 3-bit field (bit 2 = reserved, 1 = DF, 0 = MF).
IP_FLAG_RESERVED = 0x4
IP_FLAG_DF = 0x2
IP_FLAG_MF = 0x1

_ETH = struct.Struct(">6s6sH")
_IPV4 = struct.Struct(">BBHHHBBH4s4s")
_TCP = struct.Struct(">HHIIBBHHH")
_UDP = struct.Struct(">HHHH")
_ICMP = struct.Struct(">BBHI")


class FrameTooShort(ValueError):
    """Frame shorter than the 14-byte Ethernet header."""


class FieldOutOfRange(ValueError):
    """A header field does not fit its wire encoding."""

    def __init__(self, field: str, value: int):
        super().__init__(f"{field}={value!r} out of range")
        self.field = field
        self.value = value


class InconsistentLengths(ValueError):
    """Length-bearing fields disagree with actual layout (normalize mode only)."""


class Anomaly(Enum):
    """Per-packet-decidable grammar violations."""

    BAD_IP_CHECKSUM = "bad_ip_checksum"
    BAD_IHL = "bad_ihl"
    LENGTH_MISMATCH = "length_mismatch"
    ILLEGAL_TCP_FLAGS = "illegal_tcp_flags"
    BAD_DATA_OFFSET = "bad_data_offset"
    TRUNCATED_HEADER = "truncated_header"
    NON_IPV4 = "non_ipv4"


@dataclass(frozen=True)
class EthernetHeader:
    dst_mac: bytes
    src_mac: bytes
    ethertype: int


@dataclass(frozen=True)
class Ipv4Header:
    version: int
    ihl: int
    tos: int
    total_length: int
    identification: int
    flags: int  # 3-bit field
    fragment_offset: int  # 13-bit field, 8-byte units
    ttl: int
    protocol: int
    header_checksum: int
    src_addr: bytes  # 4 octets
    dst_addr: bytes  # 4 octets
    options: bytes = b""

    @property
    def df(self) -> bool:
        return bool(self.flags & IP_FLAG_DF)

    @property
    def mf(self) -> bool:
        return bool(self.flags & IP_FLAG_MF)

    @property
    def header_len(self) -> int:
        """Header length the ihl field claims, in bytes."""
        return self.ihl * 4


@dataclass(frozen=True)
class TcpHeader:
    src_port: int
    dst_port: int
    seq: int
    ack: int
    data_offset: int
    flags: int  # 8-bit CWR..FIN
    window: int
    checksum: int
    urgent_ptr: int
    options: bytes = b""
    reserved: int = 0  # low nibble of byte 12, kept for lossless round-trip

    @property
    def header_len(self) -> int:
        return self.data_offset * 4


@dataclass(frozen=True)
class UdpHeader:
    src_port: int
    dst_port: int
    length: int
    checksum: int


@dataclass(frozen=True)
class IcmpHeader:
    icmp_type: int
    icmp_code: int
    checksum: int
    rest_of_header: int  # raw 32-bit remainder (id/seq for echo)


Transport = TcpHeader | UdpHeader | IcmpHeader


@dataclass(frozen=True)
class Packet:
    """Decoded layered view of one captured frame.

    ``payload`` holds the bytes after the innermost decoded header; ``raw`` is
    the original frame as captured (empty for hand-built packets).
    """

    timestamp_us: int
    link: EthernetHeader
    ip: Ipv4Header | None
    transport: Transport | None
    payload: bytes
    raw: bytes = b""

    @property
    def payload_len(self) -> int:
        return len(self.payload)


def internet_checksum(data: bytes) -> int:
    """RFC 1071 ones-complement checksum of ``data`` (odd length padded with 0)."""
    if len(data) % 2:
        data = data + b"\x00"
    if len(data) >= 128:
        import numpy as np

        words = np.frombuffer(data, dtype=">u2").astype(np.uint64)
        total = int(words.sum())
    else:
        total = 0
        for i in range(0, len(data), 2):
            total += (data[i] << 8) | data[i + 1]
    while total > 0xFFFF:
        total = (total & 0xFFFF) + (total >> 16)
    return (~total) & 0xFFFF


def _pseudo_header(ip: Ipv4Header, proto: int, seg_len: int) -> bytes:
    return ip.src_addr + ip.dst_addr + struct.pack(">BBH", 0, proto, seg_len)


def tcp_checksum(ip: Ipv4Header, tcp_bytes: bytes) -> int:
    """TCP checksum over IPv4 pseudo-header + segment (checksum field zeroed by caller)."""
    return internet_checksum(_pseudo_header(ip, PROTO_TCP, len(tcp_bytes)) + tcp_bytes)


def udp_checksum(ip: Ipv4Header, udp_bytes: bytes) -> int:
    """UDP checksum; a computed 0 is transmitted as 0xFFFF per RFC 768."""
    c = internet_checksum(_pseudo_header(ip, PROTO_UDP, len(udp_bytes)) + udp_bytes)
    return 0xFFFF if c == 0 else c


def _decode_ipv4(data: bytes) -> tuple[Ipv4Header | None, bytes]:
    """Returns (header or None, bytes after the header region)."""
    if len(data) < 20:
        return None, data
    b0, tos, total_length, ident, flags_frag, ttl, proto, cksum, src, dst = _IPV4.unpack(
        data[:20]
    )
    ihl = b0 & 0x0F
    span = ihl * 4 if ihl >= 5 else 20
    have = min(span, len(data))
    header = Ipv4Header(
        version=b0 >> 4,
        ihl=ihl,
        tos=tos,
        total_length=total_length,
        identification=ident,
        flags=flags_frag >> 13,
        fragment_offset=flags_frag & 0x1FFF,
        ttl=ttl,
        protocol=proto,
        header_checksum=cksum,
        src_addr=src,
        dst_addr=dst,
        options=data[20:have],
    )
    return header, data[have:]


def _decode_tcp(data: bytes) -> tuple[TcpHeader | None, bytes]:
    if len(data) < 20:
        return None, data
    sport, dport, seq, ack, off_rsv, flags, window, cksum, urg = _TCP.unpack(data[:20])
    off = off_rsv >> 4
    span = off * 4 if off >= 5 else 20
    have = min(span, len(data))
    header = TcpHeader(
        src_port=sport,
        dst_port=dport,
        seq=seq,
        ack=ack,
        data_offset=off,
        reserved=off_rsv & 0x0F,
        flags=flags,
        window=window,
        checksum=cksum,
        urgent_ptr=urg,
        options=data[20:have],
    )
    return header, data[have:]


def decode_frame(frame: bytes, timestamp_us: int = 0) -> Packet:
    """Decode one Ethernet frame. Total for any input of >= 14 bytes."""
    if len(frame) < 14:
        raise FrameTooShort(f"frame is {len(frame)} bytes, need >= 14")
    dst, src, ethertype = _ETH.unpack(frame[:14])
    link = EthernetHeader(dst_mac=dst, src_mac=src, ethertype=ethertype)
    rest = frame[14:]

    ip: Ipv4Header | None = None
    transport: Transport | None = None
    payload = rest

    if ethertype == ETHERTYPE_IPV4:
        ip, after = _decode_ipv4(rest)
        if ip is not None:
            payload = after
            if ip.protocol == PROTO_TCP:
                transport, tail = _decode_tcp(after)
                if transport is not None:
                    payload = tail
            elif ip.protocol == PROTO_UDP and len(after) >= 8:
                sport, dport, length, cksum = _UDP.unpack(after[:8])
                transport = UdpHeader(sport, dport, length, cksum)
                payload = after[8:]
            elif ip.protocol == PROTO_ICMP and len(after) >= 8:
                itype, icode, cksum, rest_hdr = _ICMP.unpack(after[:8])
                transport = IcmpHeader(itype, icode, cksum, rest_hdr)
                payload = after[8:]
    return Packet(
        timestamp_us=timestamp_us,
        link=link,
        ip=ip,
        transport=transport,
        payload=payload,
        raw=frame,
    )


def _check_range(field: str, value: int, lo: int, hi: int) -> None:
    if not isinstance(value, int) or not lo <= value <= hi:
        raise FieldOutOfRange(field, value)


def _encode_ipv4(ip: Ipv4Header, payload_len: int, normalize: bool) -> bytes:
    _check_range("ip.version", ip.version, 0, 15)
    _check_range("ip.ihl", ip.ihl, 0, 15)
    _check_range("ip.tos", ip.tos, 0, 255)
    _check_range("ip.total_length", ip.total_length, 0, 65535)
    _check_range("ip.identification", ip.identification, 0, 65535)
    _check_range("ip.flags", ip.flags, 0, 7)
    _check_range("ip.fragment_offset", ip.fragment_offset, 0, 8191)
    _check_range("ip.ttl", ip.ttl, 0, 255)
    _check_range("ip.protocol", ip.protocol, 0, 255)
    _check_range("ip.header_checksum", ip.header_checksum, 0, 65535)
    if len(ip.src_addr) != 4 or len(ip.dst_addr) != 4:
        raise FieldOutOfRange("ip.addr", -1)
    if normalize:
        if ip.ihl < 5 or len(ip.options) != (ip.ihl - 5) * 4:
            raise InconsistentLengths(
                f"ihl={ip.ihl} implies {max(0, (ip.ihl - 5) * 4)} option bytes, "
                f"have {len(ip.options)}"
            )
    header = bytearray(
        _IPV4.pack(
            (ip.version << 4) | ip.ihl,
            ip.tos,
            ip.total_length,
            ip.identification,
            (ip.flags << 13) | ip.fragment_offset,
            ip.ttl,
            ip.protocol,
            0 if normalize else ip.header_checksum,
            ip.src_addr,
            ip.dst_addr,
        )
    )
    header += ip.options
    if normalize:
        cksum = internet_checksum(bytes(header))
        header[10:12] = struct.pack(">H", cksum)
    return bytes(header)


def _encode_tcp(t: TcpHeader, ip: Ipv4Header | None, payload: bytes, normalize: bool) -> bytes:
    _check_range("tcp.src_port", t.src_port, 0, 65535)
    _check_range("tcp.dst_port", t.dst_port, 0, 65535)
    _check_range("tcp.seq", t.seq, 0, 2**32 - 1)
    _check_range("tcp.ack", t.ack, 0, 2**32 - 1)
    _check_range("tcp.data_offset", t.data_offset, 0, 15)
    _check_range("tcp.reserved", t.reserved, 0, 15)
    _check_range("tcp.flags", t.flags, 0, 255)
    _check_range("tcp.window", t.window, 0, 65535)
    _check_range("tcp.checksum", t.checksum, 0, 65535)
    _check_range("tcp.urgent_ptr", t.urgent_ptr, 0, 65535)
    if normalize and (t.data_offset < 5 or len(t.options) != (t.data_offset - 5) * 4):
        raise InconsistentLengths(
            f"data_offset={t.data_offset} implies {max(0, (t.data_offset - 5) * 4)} "
            f"option bytes, have {len(t.options)}"
        )
    seg = bytearray(
        _TCP.pack(
            t.src_port,
            t.dst_port,
            t.seq,
            t.ack,
            (t.data_offset << 4) | t.reserved,
            t.flags,
            t.window,
            0 if normalize else t.checksum,
            t.urgent_ptr,
        )
    )
    seg += t.options
    seg += payload
    if normalize:
        assert ip is not None
        seg[16:18] = struct.pack(">H", tcp_checksum(ip, bytes(seg)))
    return bytes(seg)


def encode_packet(p: Packet, normalize: bool = False) -> bytes:
    """Serialize a Packet back to frame bytes.

    Raw mode (default) emits every field verbatim, checksums included, so
    deliberately corrupt packets survive a round-trip. Normalize mode verifies
    length consistency (raising InconsistentLengths) and recomputes IP and
    transport checksums.
    """
    _check_range("eth.ethertype", p.link.ethertype, 0, 65535)
    if len(p.link.dst_mac) != 6 or len(p.link.src_mac) != 6:
        raise FieldOutOfRange("eth.mac", -1)
    out = bytearray(_ETH.pack(p.link.dst_mac, p.link.src_mac, p.link.ethertype))

    if p.ip is None:
        out += p.payload
        return bytes(out)

    ip = p.ip
    if normalize:
        transport_len = 0
        if isinstance(p.transport, TcpHeader):
            transport_len = 20 + len(p.transport.options)
        elif isinstance(p.transport, (UdpHeader, IcmpHeader)):
            transport_len = 8
        expect_total = ip.header_len + transport_len + len(p.payload)
        if ip.total_length != expect_total:
            raise InconsistentLengths(
                f"total_length={ip.total_length}, layout implies {expect_total}"
            )

    if isinstance(p.transport, TcpHeader):
        out += _encode_ipv4(ip, 20 + len(p.transport.options) + len(p.payload), normalize)
        out += _encode_tcp(p.transport, ip, p.payload, normalize)
    elif isinstance(p.transport, UdpHeader):
        u = p.transport
        _check_range("udp.src_port", u.src_port, 0, 65535)
        _check_range("udp.dst_port", u.dst_port, 0, 65535)
        _check_range("udp.length", u.length, 0, 65535)
        _check_range("udp.checksum", u.checksum, 0, 65535)
        if normalize and u.length != 8 + len(p.payload):
            raise InconsistentLengths(f"udp.length={u.length}, have {8 + len(p.payload)}")
        out += _encode_ipv4(ip, 8 + len(p.payload), normalize)
        seg = bytearray(_UDP.pack(u.src_port, u.dst_port, u.length, 0 if normalize else u.checksum))
        seg += p.payload
        if normalize:
            seg[6:8] = struct.pack(">H", udp_checksum(ip, bytes(seg)))
        out += seg
    elif isinstance(p.transport, IcmpHeader):
        ic = p.transport
        _check_range("icmp.type", ic.icmp_type, 0, 255)
        _check_range("icmp.code", ic.icmp_code, 0, 255)
        _check_range("icmp.checksum", ic.checksum, 0, 65535)
        _check_range("icmp.rest_of_header", ic.rest_of_header, 0, 2**32 - 1)
        out += _encode_ipv4(ip, 8 + len(p.payload), normalize)
        seg = bytearray(
            _ICMP.pack(ic.icmp_type, ic.icmp_code, 0 if normalize else ic.checksum, ic.rest_of_header)
        )
        seg += p.payload
        if normalize:
            seg[2:4] = struct.pack(">H", internet_checksum(bytes(seg)))
        out += seg
    else:
        out += _encode_ipv4(ip, len(p.payload), normalize)
        out += p.payload
    return bytes(out)


_ILLEGAL_FLAG_COMBOS = (TCP_SYN | TCP_FIN, TCP_SYN | TCP_RST)


def _transport_wire_len(t: Transport | None) -> int:
    if isinstance(t, TcpHeader):
        return 20 + len(t.options)
    if isinstance(t, (UdpHeader, IcmpHeader)):
        return 8
    return 0


def validate_packet(p: Packet) -> list[Anomaly]:
    """Structural grammar check; empty list means the packet is well-formed.

    Only per-packet-decidable rules: nothing here needs flow state, so e.g. a
    bare FIN without ACK is legal as far as this check is concerned.
    """
    found: list[Anomaly] = []

    if p.link.ethertype != ETHERTYPE_IPV4:
        return [Anomaly.NON_IPV4]
    if p.ip is None:
        return [Anomaly.TRUNCATED_HEADER]

    ip = p.ip
    if ip.ihl < 5:
        found.append(Anomaly.BAD_IHL)
    else:
        options_expected = (ip.ihl - 5) * 4
        if len(ip.options) != options_expected:
            found.append(Anomaly.TRUNCATED_HEADER)
        else:
            # Recompute over the actual header bytes with the checksum zeroed.
            hdr = bytearray(
                _IPV4.pack(
                    (ip.version << 4) | ip.ihl,
                    ip.tos,
                    ip.total_length,
                    ip.identification,
                    (ip.flags << 13) | ip.fragment_offset,
                    ip.ttl,
                    ip.protocol,
                    0,
                    ip.src_addr,
                    ip.dst_addr,
                )
            )
            hdr += ip.options
            if internet_checksum(bytes(hdr)) != ip.header_checksum:
                found.append(Anomaly.BAD_IP_CHECKSUM)

    actual_datagram = 20 + len(ip.options) + _transport_wire_len(p.transport) + p.payload_len
    if ip.total_length != actual_datagram:
        found.append(Anomaly.LENGTH_MISMATCH)
    elif ip.ihl >= 5 and ip.total_length < ip.header_len:
        found.append(Anomaly.LENGTH_MISMATCH)

    if ip.protocol in (PROTO_TCP, PROTO_UDP, PROTO_ICMP) and p.transport is None:
        found.append(Anomaly.TRUNCATED_HEADER)

    t = p.transport
    if isinstance(t, TcpHeader):
        if t.data_offset < 5:
            found.append(Anomaly.BAD_DATA_OFFSET)
        elif len(t.options) != (t.data_offset - 5) * 4:
            found.append(Anomaly.TRUNCATED_HEADER)
        if (
            t.flags == 0
            or t.flags == 0xFF
            or any((t.flags & combo) == combo for combo in _ILLEGAL_FLAG_COMBOS)
        ):
            found.append(Anomaly.ILLEGAL_TCP_FLAGS)
    elif isinstance(t, UdpHeader):
        if t.length < 8 or t.length != 8 + p.payload_len:
            found.append(Anomaly.LENGTH_MISMATCH)

    # Preserve first-seen order, drop duplicates.
    seen: list[Anomaly] = []
    for a in found:
        if a not in seen:
            seen.append(a)
    return seen


def format_ip(addr: bytes) -> str:
    return ".".join(str(b) for b in addr)


def parse_ip(text: str) -> bytes:
    parts = [int(x) for x in text.split(".")]
    if len(parts) != 4 or any(not 0 <= x <= 255 for x in parts):
        raise ValueError(f"bad IPv4 address {text!r}")
    return bytes(parts)
