"""Deterministic, seeded synthesis of labeled mixed traffic.

A scenario is a declarative config: hosts, a benign traffic profile, and any
number of attack streams drawn from {syn_flood, udp_flood, icmp_flood,
link_flood, malformed}. Synthesis replaces a network emulator: no switch or
controller state is modeled, only the packet stream a capture point would see.

Everything is integer microseconds and splitmix64 draws, so a config (seed
included) maps to byte-identical pcap output on every platform. Generator
streams are derived statelessly: benign flow i uses PRNG stream i, attack k
uses stream ATTACK_STREAM_BASE + k * ATTACK_STREAM_SPAN, link-flood flow j
within attack k adds j+1. Records before ``warmup_s`` are dropped per-record
after generation (capture starts once traffic has stabilized); timestamps are
not re-based, so inter-arrival gaps between retained packets stay exact.

Benign flows walk a full TCP lifecycle (documented state machine):

    SYN -> SYN+ACK -> ACK                       handshake, MSS option on SYNs
    {DATA(PSH+ACK) -> ACK(server)} per segment  cumulative seq/ack arithmetic
    FIN+ACK -> FIN+ACK -> ACK                   3-packet teardown

so a zero-segment flow is exactly 6 packets. Per-class wire signatures of the
default scenario keep the four classes separable from tokens alone: benign
flows use TTL 64/128 with windows >= 8192 and an MSS option on SYNs; SYN-flood
packets have bare SYN, no options and windows <= 1024; link-flood flows run at
TTL 32 with mid-range windows toward the bottleneck host; volumetric floods
are the only UDP/ICMP traffic; malformed packets carry TTL 255 plus a rotating
structural violation.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from typing import NamedTuple

from . import CLASS_NAMES, CLASS_TO_ID
from .packets import (
    EthernetHeader,
    IcmpHeader,
    Ipv4Header,
    Packet,
    TcpHeader,
    UdpHeader,
    IP_FLAG_DF,
    TCP_ACK,
    TCP_FIN,
    TCP_PSH,
    TCP_SYN,
    ETHERTYPE_IPV4,
    PROTO_ICMP,
    PROTO_TCP,
    PROTO_UDP,
    encode_packet,
    format_ip,
    parse_ip,
)
from .pcap import CaptureMeta, CaptureRecord, write_pcap
from .rng import SplitMix64, derive_stream_seed

LABEL_BENIGN = CLASS_TO_ID["benign"]
LABEL_VOLUMETRIC = CLASS_TO_ID["volumetric"]
LABEL_PROTOCOL = CLASS_TO_ID["protocol"]
LABEL_VULNERABILITY = CLASS_TO_ID["vulnerability"]

ATTACK_KINDS = ("syn_flood", "udp_flood", "icmp_flood", "link_flood", "malformed")
ATTACK_CLASS = {
    "syn_flood": LABEL_PROTOCOL,
    "udp_flood": LABEL_VOLUMETRIC,
    "icmp_flood": LABEL_VOLUMETRIC,
    "link_flood": LABEL_PROTOCOL,
    "malformed": LABEL_VULNERABILITY,
}

HOST_ROLES = ("client", "server", "attacker", "bottleneck")

ATTACK_STREAM_BASE = 1 << 32
ATTACK_STREAM_SPAN = 1 << 20

MALFORMED_VARIANTS = ("syn_fin", "zero_flags", "all_flags", "bad_ihl", "bad_checksum", "truncated")

MSS_OPTION = b"\x02\x04\x05\xb4"  # MSS 1460

_PATTERN = bytes(range(256)) * 2


class InvalidConfig(ValueError):
    """Scenario config rejected; message carries the offending field path."""

    def __init__(self, path: str, msg: str):
        super().__init__(f"{path}: {msg}")
        self.path = path


class TimedFrame(NamedTuple):
    ts_us: int
    frame: bytes
    label: int
    flow_id: int


@dataclass(frozen=True)
class Host:
    addr: bytes
    role: str


@dataclass(frozen=True)
class BenignProfile:
    flow_rate: float = 50.0  # flows per second
    dst_ports: tuple[int, ...] = (80, 443)
    payload_min: int = 64
    payload_max: int = 900
    segments_min: int = 1
    segments_max: int = 3


@dataclass(frozen=True)
class AttackSpec:
    kind: str
    rate: float  # packets per second (aggregate)
    target_addr: bytes
    target_port: int = 80
    start_s: float = 0.0
    spoofing: bool = True
    payload_min: int = -1  # -1 selects the per-kind default
    payload_max: int = -1
    per_flow_rate: float = 2.0  # link_flood only

    def payload_bounds(self) -> tuple[int, int]:
        if self.payload_min >= 0 and self.payload_max >= 0:
            return self.payload_min, self.payload_max
        if self.kind == "link_flood":
            return 16, 64
        return 1024, 1400


@dataclass(frozen=True)
class ScenarioConfig:
    seed: int
    duration_s: float = 12.0
    warmup_s: float = 2.0
    hosts: tuple[Host, ...] = ()
    benign: BenignProfile | None = None
    attacks: tuple[AttackSpec, ...] = ()

    @property
    def duration_us(self) -> int:
        return int(round(self.duration_s * 1_000_000))

    @property
    def warmup_us(self) -> int:
        return int(round(self.warmup_s * 1_000_000))

    def hosts_with_role(self, role: str) -> list[Host]:
        return [h for h in self.hosts if h.role == role]


@dataclass
class LabeledCapture:
    meta: CaptureMeta
    records: list[CaptureRecord]
    labels: list[int]  # class id per record, same order
    flow_ids: list[int]
    manifest: dict

    @property
    def pcap_bytes(self) -> bytes:
        return write_pcap(self.meta, self.records)


# ---------------------------------------------------------------- config io


def _require(cond: bool, path: str, msg: str) -> None:
    if not cond:
        raise InvalidConfig(path, msg)


def _check_keys(obj: dict, allowed: set[str], path: str) -> None:
    for key in obj:
        if key not in allowed:
            raise InvalidConfig(f"{path}.{key}" if path else key, "unknown key")


def _parse_addr(value, path: str) -> bytes:
    _require(isinstance(value, str), path, "expected dotted-quad string")
    try:
        return parse_ip(value)
    except ValueError as e:
        raise InvalidConfig(path, str(e)) from None


def _parse_number(value, path: str, minimum=None) -> float:
    _require(isinstance(value, (int, float)) and not isinstance(value, bool), path, "expected number")
    if minimum is not None:
        _require(value >= minimum, path, f"must be >= {minimum}")
    return float(value)


def config_from_dict(doc: dict) -> ScenarioConfig:
    """Parse and validate a scenario document; raises InvalidConfig with a field path."""
    _require(isinstance(doc, dict), "", "config root must be an object")
    _check_keys(doc, {"seed", "duration_s", "warmup_s", "hosts", "benign", "attacks"}, "")

    _require("seed" in doc, "seed", "required")
    seed = doc["seed"]
    _require(isinstance(seed, int) and not isinstance(seed, bool), "seed", "expected integer")
    _require(0 <= seed < 2**64, "seed", "must fit in 64 bits")

    duration_s = _parse_number(doc.get("duration_s", 12.0), "duration_s", minimum=0.000001)
    warmup_s = _parse_number(doc.get("warmup_s", 2.0), "warmup_s", minimum=0.0)
    _require(warmup_s < duration_s, "warmup_s", "must be < duration_s")

    hosts: list[Host] = []
    raw_hosts = doc.get("hosts", [])
    _require(isinstance(raw_hosts, list), "hosts", "expected array")
    for i, h in enumerate(raw_hosts):
        path = f"hosts[{i}]"
        _require(isinstance(h, dict), path, "expected object")
        _check_keys(h, {"addr", "role"}, path)
        _require("addr" in h and "role" in h, path, "addr and role required")
        _require(h["role"] in HOST_ROLES, f"{path}.role", f"must be one of {HOST_ROLES}")
        hosts.append(Host(addr=_parse_addr(h["addr"], f"{path}.addr"), role=h["role"]))

    benign = None
    if doc.get("benign") is not None:
        b = doc["benign"]
        path = "benign"
        _require(isinstance(b, dict), path, "expected object")
        allowed = {"flow_rate", "dst_ports", "payload_min", "payload_max", "segments_min", "segments_max"}
        _check_keys(b, allowed, path)
        ports = b.get("dst_ports", [80, 443])
        _require(isinstance(ports, list) and ports, f"{path}.dst_ports", "expected non-empty array")
        for j, p in enumerate(ports):
            _require(isinstance(p, int) and 0 <= p <= 65535, f"{path}.dst_ports[{j}]", "bad port")
        benign = BenignProfile(
            flow_rate=_parse_number(b.get("flow_rate", 50.0), f"{path}.flow_rate", minimum=1e-9),
            dst_ports=tuple(ports),
            payload_min=int(_parse_number(b.get("payload_min", 64), f"{path}.payload_min", 0)),
            payload_max=int(_parse_number(b.get("payload_max", 900), f"{path}.payload_max", 0)),
            segments_min=int(_parse_number(b.get("segments_min", 1), f"{path}.segments_min", 0)),
            segments_max=int(_parse_number(b.get("segments_max", 3), f"{path}.segments_max", 0)),
        )
        _require(benign.payload_min <= benign.payload_max, f"{path}.payload_max", "must be >= payload_min")
        _require(benign.segments_min <= benign.segments_max, f"{path}.segments_max", "must be >= segments_min")

    attacks: list[AttackSpec] = []
    raw_attacks = doc.get("attacks", [])
    _require(isinstance(raw_attacks, list), "attacks", "expected array")
    for i, a in enumerate(raw_attacks):
        path = f"attacks[{i}]"
        _require(isinstance(a, dict), path, "expected object")
        allowed = {"kind", "rate", "start_s", "spoofing", "target_addr", "target_port",
                   "payload_min", "payload_max", "per_flow_rate"}
        _check_keys(a, allowed, path)
        _require(a.get("kind") in ATTACK_KINDS, f"{path}.kind", f"must be one of {ATTACK_KINDS}")
        _require("target_addr" in a, f"{path}.target_addr", "required")
        target_port = a.get("target_port", 80)
        _require(isinstance(target_port, int) and 0 <= target_port <= 65535, f"{path}.target_port", "bad port")
        spoofing = a.get("spoofing", True)
        _require(isinstance(spoofing, bool), f"{path}.spoofing", "expected boolean")
        start_s = _parse_number(a.get("start_s", 0.0), f"{path}.start_s", minimum=0.0)
        _require(start_s < duration_s, f"{path}.start_s", "must be < duration_s")
        _require("rate" in a, f"{path}.rate", "required")
        spec = AttackSpec(
            kind=a["kind"],
            rate=_parse_number(a["rate"], f"{path}.rate", minimum=1e-9),
            target_addr=_parse_addr(a["target_addr"], f"{path}.target_addr"),
            target_port=target_port,
            start_s=start_s,
            spoofing=spoofing,
            payload_min=int(_parse_number(a["payload_min"], f"{path}.payload_min", 0)) if "payload_min" in a else -1,
            payload_max=int(_parse_number(a["payload_max"], f"{path}.payload_max", 0)) if "payload_max" in a else -1,
            per_flow_rate=_parse_number(a.get("per_flow_rate", 2.0), f"{path}.per_flow_rate", minimum=1e-9),
        )
        attacks.append(spec)

    config = ScenarioConfig(
        seed=seed,
        duration_s=duration_s,
        warmup_s=warmup_s,
        hosts=tuple(hosts),
        benign=benign,
        attacks=tuple(attacks),
    )
    if attacks:
        _require(bool(config.hosts_with_role("server")), "hosts", "need a server when attacks present")
        _require(bool(config.hosts_with_role("attacker")), "hosts", "need an attacker when attacks present")
    if benign is not None:
        _require(bool(config.hosts_with_role("client")), "hosts", "need a client for benign traffic")
        _require(bool(config.hosts_with_role("server")), "hosts", "need a server for benign traffic")
    return config


def config_to_dict(config: ScenarioConfig) -> dict:
    doc = {
        "seed": config.seed,
        "duration_s": config.duration_s,
        "warmup_s": config.warmup_s,
        "hosts": [{"addr": format_ip(h.addr), "role": h.role} for h in config.hosts],
    }
    if config.benign is not None:
        b = config.benign
        doc["benign"] = {
            "flow_rate": b.flow_rate,
            "dst_ports": list(b.dst_ports),
            "payload_min": b.payload_min,
            "payload_max": b.payload_max,
            "segments_min": b.segments_min,
            "segments_max": b.segments_max,
        }
    if config.attacks:
        doc["attacks"] = []
        for a in config.attacks:
            entry = {
                "kind": a.kind,
                "rate": a.rate,
                "target_addr": format_ip(a.target_addr),
                "target_port": a.target_port,
                "start_s": a.start_s,
                "spoofing": a.spoofing,
                "per_flow_rate": a.per_flow_rate,
            }
            if a.payload_min >= 0:
                entry["payload_min"] = a.payload_min
            if a.payload_max >= 0:
                entry["payload_max"] = a.payload_max
            doc["attacks"].append(entry)
    return doc


def load_config(text: str) -> ScenarioConfig:
    return config_from_dict(json.loads(text))


def default_scenario(seed: int = 42) -> ScenarioConfig:
    """Calibrated all-class scenario: roughly balanced post-warmup classes."""
    hosts = tuple(
        [Host(parse_ip(f"10.0.1.{i}"), "client") for i in range(1, 5)]
        + [Host(parse_ip("10.0.0.2"), "server"), Host(parse_ip("10.0.0.3"), "server")]
        + [Host(parse_ip("10.0.9.1"), "attacker"), Host(parse_ip("10.0.0.9"), "bottleneck")]
    )
    return ScenarioConfig(
        seed=seed,
        duration_s=12.0,
        warmup_s=2.0,
        hosts=hosts,
        benign=BenignProfile(),
        attacks=(
            AttackSpec(kind="syn_flood", rate=250.0, target_addr=parse_ip("10.0.0.2")),
            AttackSpec(kind="udp_flood", rate=250.0, target_addr=parse_ip("10.0.0.2"), target_port=53),
            AttackSpec(kind="icmp_flood", rate=250.0, target_addr=parse_ip("10.0.0.3")),
            AttackSpec(kind="link_flood", rate=290.0, target_addr=parse_ip("10.0.0.9"), per_flow_rate=2.0),
            AttackSpec(kind="malformed", rate=500.0, target_addr=parse_ip("10.0.0.2")),
        ),
    )


# ------------------------------------------------------------- frame helpers


def mac_for(addr: bytes) -> bytes:
    """Locally administered MAC derived from the IPv4 address."""
    return b"\x02\x00" + addr


def payload_bytes(n: int, salt: int) -> bytes:
    if n <= 0:
        return b""
    start = salt & 0xFF
    reps = (n // 512) + 2
    return (_PATTERN * reps)[start : start + n]


def _eth(src: bytes, dst: bytes) -> EthernetHeader:
    return EthernetHeader(dst_mac=mac_for(dst), src_mac=mac_for(src), ethertype=ETHERTYPE_IPV4)


def build_tcp_frame(
    src: bytes,
    dst: bytes,
    sport: int,
    dport: int,
    seq: int,
    ack: int,
    flags: int,
    window: int,
    payload: bytes = b"",
    options: bytes = b"",
    ttl: int = 64,
    ip_id: int = 0,
    ip_flags: int = IP_FLAG_DF,
) -> bytes:
    tcp = TcpHeader(
        src_port=sport,
        dst_port=dport,
        seq=seq,
        ack=ack,
        data_offset=5 + len(options) // 4,
        flags=flags,
        window=window,
        checksum=0,
        urgent_ptr=0,
        options=options,
    )
    ip = Ipv4Header(
        version=4,
        ihl=5,
        tos=0,
        total_length=20 + 20 + len(options) + len(payload),
        identification=ip_id,
        flags=ip_flags,
        fragment_offset=0,
        ttl=ttl,
        protocol=PROTO_TCP,
        header_checksum=0,
        src_addr=src,
        dst_addr=dst,
    )
    return encode_packet(Packet(0, _eth(src, dst), ip, tcp, payload), normalize=True)


def build_udp_frame(src, dst, sport, dport, payload, ttl=64, ip_id=0) -> bytes:
    udp = UdpHeader(src_port=sport, dst_port=dport, length=8 + len(payload), checksum=0)
    ip = Ipv4Header(
        version=4, ihl=5, tos=0, total_length=20 + 8 + len(payload), identification=ip_id,
        flags=IP_FLAG_DF, fragment_offset=0, ttl=ttl, protocol=PROTO_UDP, header_checksum=0,
        src_addr=src, dst_addr=dst,
    )
    return encode_packet(Packet(0, _eth(src, dst), ip, udp, payload), normalize=True)


def build_icmp_frame(src, dst, icmp_type, icmp_code, rest, payload, ttl=64, ip_id=0) -> bytes:
    icmp = IcmpHeader(icmp_type=icmp_type, icmp_code=icmp_code, checksum=0, rest_of_header=rest)
    ip = Ipv4Header(
        version=4, ihl=5, tos=0, total_length=20 + 8 + len(payload), identification=ip_id,
        flags=0, fragment_offset=0, ttl=ttl, protocol=PROTO_ICMP, header_checksum=0,
        src_addr=src, dst_addr=dst,
    )
    return encode_packet(Packet(0, _eth(src, dst), ip, icmp, payload), normalize=True)


def _random_addr(rng: SplitMix64) -> bytes:
    # avoid 0.x and 255.x first octets so spoofed sources look routable
    return bytes([rng.randint(1, 254), rng.randrange(256), rng.randrange(256), rng.randrange(256)])


def _schedule(start_us: int, end_us: int, count: int, rng: SplitMix64) -> list[int]:
    """count strictly increasing timestamps in [start_us, end_us)."""
    if count <= 0:
        return []
    span = end_us - start_us
    gap = max(1, span // count)
    jitter_cap = max(1, gap // 2)
    return [start_us + (k * span) // count + rng.randrange(jitter_cap) for k in range(count)]


def _packet_count(rate: float, span_s: float) -> int:
    return int(rate * span_s + 1e-9)


# ---------------------------------------------------------------- generators


@dataclass(frozen=True)
class FlowSpec:
    """One benign TCP conversation."""

    client: bytes
    server: bytes
    src_port: int
    dst_port: int
    start_us: int
    end_us: int  # capture end; packets beyond are dropped
    segment_sizes: tuple[int, ...]
    ttl: int = 64
    win_min: int = 8192
    win_max: int = 65535
    flow_id: int = 0
    label: int = LABEL_BENIGN


def gen_benign_flow(rng: SplitMix64, spec: FlowSpec) -> list[TimedFrame]:
    """Full TCP lifecycle with cumulative seq/ack arithmetic (see module doc)."""
    client, server = spec.client, spec.server
    isn_c = rng.randrange(2**32)
    isn_s = rng.randrange(2**32)
    win_c = rng.randint(spec.win_min, spec.win_max)
    win_s = rng.randint(spec.win_min, spec.win_max)
    rtt = rng.randint(500, 5000)
    ip_id_c = rng.randrange(2**16)
    ip_id_s = rng.randrange(2**16)
    salt = rng.randrange(256)

    out: list[TimedFrame] = []
    ts = spec.start_us

    def emit(src_is_client: bool, seq: int, ack: int, flags: int, payload: bytes = b"", options: bytes = b""):
        nonlocal ts, ip_id_c, ip_id_s
        if src_is_client:
            src, dst, sp, dp, win, ttl = client, server, spec.src_port, spec.dst_port, win_c, spec.ttl
            ip_id_c = (ip_id_c + 1) & 0xFFFF
            ip_id = ip_id_c
        else:
            src, dst, sp, dp, win, ttl = server, client, spec.dst_port, spec.src_port, win_s, 64
            ip_id_s = (ip_id_s + 1) & 0xFFFF
            ip_id = ip_id_s
        frame = build_tcp_frame(
            src, dst, sp, dp, seq, ack, flags, win,
            payload=payload, options=options, ttl=ttl, ip_id=ip_id,
        )
        if ts < spec.end_us:
            out.append(TimedFrame(ts, frame, spec.label, spec.flow_id))
        ts += max(1, rtt // 2 + rng.randrange(max(1, rtt // 4)))

    emit(True, isn_c, 0, TCP_SYN, options=MSS_OPTION)
    emit(False, isn_s, (isn_c + 1) & 0xFFFFFFFF, TCP_SYN | TCP_ACK, options=MSS_OPTION)
    emit(True, (isn_c + 1) & 0xFFFFFFFF, (isn_s + 1) & 0xFFFFFFFF, TCP_ACK)

    sent = 0
    for size in spec.segment_sizes:
        emit(
            True,
            (isn_c + 1 + sent) & 0xFFFFFFFF,
            (isn_s + 1) & 0xFFFFFFFF,
            TCP_PSH | TCP_ACK,
            payload=payload_bytes(size, salt + sent),
        )
        sent += size
        emit(False, (isn_s + 1) & 0xFFFFFFFF, (isn_c + 1 + sent) & 0xFFFFFFFF, TCP_ACK)

    fin_seq = (isn_c + 1 + sent) & 0xFFFFFFFF
    emit(True, fin_seq, (isn_s + 1) & 0xFFFFFFFF, TCP_FIN | TCP_ACK)
    emit(False, (isn_s + 1) & 0xFFFFFFFF, (fin_seq + 1) & 0xFFFFFFFF, TCP_FIN | TCP_ACK)
    emit(True, (fin_seq + 1) & 0xFFFFFFFF, (isn_s + 2) & 0xFFFFFFFF, TCP_ACK)
    return out


def _gen_benign(config: ScenarioConfig) -> list[list[TimedFrame]]:
    profile = config.benign
    if profile is None:
        return []
    clients = config.hosts_with_role("client")
    servers = config.hosts_with_role("server")
    n_flows = _packet_count(profile.flow_rate, config.duration_s)
    duration_us = config.duration_us
    gap = max(1, duration_us // max(1, n_flows))
    flows = []
    for i in range(n_flows):
        rng = SplitMix64(derive_stream_seed(config.seed, i))
        start = (i * duration_us) // n_flows + rng.randrange(max(1, gap // 2))
        n_seg = rng.randint(profile.segments_min, profile.segments_max)
        sizes = tuple(rng.randint(profile.payload_min, profile.payload_max) for _ in range(n_seg))
        spec = FlowSpec(
            client=clients[rng.randrange(len(clients))].addr,
            server=servers[rng.randrange(len(servers))].addr,
            src_port=rng.randint(32768, 65535),
            dst_port=profile.dst_ports[rng.randrange(len(profile.dst_ports))],
            start_us=start,
            end_us=duration_us,
            segment_sizes=sizes,
            ttl=64 if rng.randrange(2) == 0 else 128,
            flow_id=i,
        )
        flows.append(gen_benign_flow(rng, spec))
    return flows


def gen_syn_flood(
    rng: SplitMix64, attack: AttackSpec, start_us: int, end_us: int, attacker: bytes, flow_id: int
) -> list[TimedFrame]:
    """Protocol attack: bare SYNs, no options, small windows, spoofed sources."""
    span_s = (end_us - start_us) / 1_000_000
    count = _packet_count(attack.rate, span_s)
    times = _schedule(start_us, end_us, count, rng.stream(1))
    out = []
    for ts in times:
        src = _random_addr(rng) if attack.spoofing else attacker
        frame = build_tcp_frame(
            src,
            attack.target_addr,
            rng.randint(1024, 65535),
            attack.target_port,
            rng.randrange(2**32),
            0,
            TCP_SYN,
            rng.randrange(1025),  # window <= 1024
            ttl=rng.randint(48, 192),
            ip_id=rng.randrange(2**16),
            ip_flags=0,
        )
        out.append(TimedFrame(ts, frame, LABEL_PROTOCOL, flow_id))
    return out


def gen_udp_flood(
    rng: SplitMix64, attack: AttackSpec, start_us: int, end_us: int, attacker: bytes, flow_id: int
) -> list[TimedFrame]:
    """Volumetric attack: high-rate large UDP datagrams."""
    lo, hi = attack.payload_bounds()
    span_s = (end_us - start_us) / 1_000_000
    times = _schedule(start_us, end_us, _packet_count(attack.rate, span_s), rng.stream(1))
    out = []
    for ts in times:
        src = _random_addr(rng) if attack.spoofing else attacker
        frame = build_udp_frame(
            src,
            attack.target_addr,
            rng.randint(32768, 65535),
            attack.target_port,
            payload_bytes(rng.randint(lo, hi), rng.randrange(256)),
            ttl=64,
            ip_id=rng.randrange(2**16),
        )
        out.append(TimedFrame(ts, frame, LABEL_VOLUMETRIC, flow_id))
    return out


def gen_icmp_flood(
    rng: SplitMix64, attack: AttackSpec, start_us: int, end_us: int, attacker: bytes, flow_id: int
) -> list[TimedFrame]:
    """Volumetric attack: echo-request flood with large payloads."""
    lo, hi = attack.payload_bounds()
    span_s = (end_us - start_us) / 1_000_000
    times = _schedule(start_us, end_us, _packet_count(attack.rate, span_s), rng.stream(1))
    out = []
    for k, ts in enumerate(times):
        src = _random_addr(rng) if attack.spoofing else attacker
        ident = rng.randrange(2**16)
        frame = build_icmp_frame(
            src,
            attack.target_addr,
            8,  # echo request
            0,
            (ident << 16) | (k & 0xFFFF),
            payload_bytes(rng.randint(lo, hi), rng.randrange(256)),
            ttl=64,
            ip_id=rng.randrange(2**16),
        )
        out.append(TimedFrame(ts, frame, LABEL_VOLUMETRIC, flow_id))
    return out


def gen_link_flood(
    rng_seed: int, attack: AttackSpec, start_us: int, end_us: int, flow_id_base: int
) -> list[list[TimedFrame]]:
    """Protocol attack: many well-formed low-rate flows converging on one host.

    Each flow handshakes then pushes small data segments at per_flow_rate for
    the rest of the capture (long-lived, no teardown). TTL 32 and mid-range
    windows are the default wire signature.
    """
    lo, hi = attack.payload_bounds()
    n_flows = max(1, int(attack.rate / attack.per_flow_rate + 1e-9))
    ramp_us = min(1_000_000, max(1, (end_us - start_us) // 10))
    flows = []
    for j in range(n_flows):
        rng = SplitMix64(derive_stream_seed(rng_seed, j + 1))
        src = _random_addr(rng)
        sport = rng.randint(32768, 65535)
        win = rng.randint(2048, 4095)
        isn = rng.randrange(2**32)
        isn_s = rng.randrange(2**32)
        salt = rng.randrange(256)
        ip_id = rng.randrange(2**16)
        flow_start = start_us + (j * ramp_us) // n_flows + rng.randrange(1000)
        out: list[TimedFrame] = []

        def emit(ts, frame):
            if start_us <= ts < end_us:
                out.append(TimedFrame(ts, frame, LABEL_PROTOCOL, flow_id_base + j))

        hs_gap = rng.randint(500, 2000)
        emit(
            flow_start,
            build_tcp_frame(src, attack.target_addr, sport, attack.target_port,
                            isn, 0, TCP_SYN, win, options=MSS_OPTION, ttl=32, ip_id=ip_id),
        )
        emit(
            flow_start + hs_gap,
            build_tcp_frame(attack.target_addr, src, attack.target_port, sport,
                            isn_s, (isn + 1) & 0xFFFFFFFF, TCP_SYN | TCP_ACK, 8192,
                            options=MSS_OPTION, ttl=64, ip_id=rng.randrange(2**16)),
        )
        emit(
            flow_start + 2 * hs_gap,
            build_tcp_frame(src, attack.target_addr, sport, attack.target_port,
                            (isn + 1) & 0xFFFFFFFF, (isn_s + 1) & 0xFFFFFFFF, TCP_ACK, win,
                            ttl=32, ip_id=(ip_id + 1) & 0xFFFF),
        )
        data_start = flow_start + 2 * hs_gap + rng.randint(500, 2000)
        span_s = max(0.0, (end_us - data_start) / 1_000_000)
        times = _schedule(data_start, end_us, _packet_count(attack.per_flow_rate, span_s), rng.stream(2))
        sent = 0
        for k, ts in enumerate(times):
            size = rng.randint(lo, hi)
            frame = build_tcp_frame(
                src, attack.target_addr, sport, attack.target_port,
                (isn + 1 + sent) & 0xFFFFFFFF, (isn_s + 1) & 0xFFFFFFFF,
                TCP_PSH | TCP_ACK, win,
                payload=payload_bytes(size, salt + k), ttl=32, ip_id=(ip_id + 2 + k) & 0xFFFF,
            )
            sent += size
            emit(ts, frame)
        flows.append(out)
    return flows


def gen_malformed(
    rng: SplitMix64, attack: AttackSpec, start_us: int, end_us: int, attacker: bytes, flow_id: int
) -> list[TimedFrame]:
    """Vulnerability attack: deterministic round-robin over grammar violations.

    Base packets carry TTL 255 (the class signature) so even the corruption
    that only breaks the checksum stays token-separable. The bad_checksum
    variant differs from its valid encoding in exactly the IP checksum field.
    """
    span_s = (end_us - start_us) / 1_000_000
    times = _schedule(start_us, end_us, _packet_count(attack.rate, span_s), rng.stream(1))
    out = []
    for k, ts in enumerate(times):
        variant = MALFORMED_VARIANTS[k % len(MALFORMED_VARIANTS)]
        src = _random_addr(rng) if attack.spoofing else attacker
        sport = rng.randint(1024, 65535)
        seq = rng.randrange(2**32)
        ip_id = rng.randrange(2**16)
        flags = {
            "syn_fin": TCP_SYN | TCP_FIN,
            "zero_flags": 0,
            "all_flags": 0xFF,
        }.get(variant, TCP_SYN)
        frame = bytearray(
            build_tcp_frame(
                src, attack.target_addr, sport, attack.target_port,
                seq, 0, flags, 512, ttl=255, ip_id=ip_id, ip_flags=0,
            )
        )
        if variant == "bad_ihl":
            frame[14] = 0x44  # version 4, ihl 4
        elif variant == "bad_checksum":
            frame[24] ^= 0xFF
            frame[25] ^= 0xFF
        elif variant == "truncated":
            frame = frame[: 14 + 12]  # cut inside the IP header
        out.append(TimedFrame(ts, bytes(frame), LABEL_VULNERABILITY, flow_id))
    return out


# --------------------------------------------------------------------- forge


def merge_timeline(lists: list[list[TimedFrame]]) -> list[TimedFrame]:
    """Globally time-ordered stable merge; ties keep source-list priority order."""
    tagged = []
    for i, lst in enumerate(lists):
        for j, tf in enumerate(lst):
            tagged.append((tf.ts_us, i, j, tf))
    tagged.sort(key=lambda t: (t[0], t[1], t[2]))
    return [t[3] for t in tagged]


def forge(config: ScenarioConfig) -> LabeledCapture:
    """Synthesize the scenario: time-sorted records, one label per record,
    warm-up period removed, manifest with config echo + content hash."""
    lists = _gen_benign(config)
    benign_flow_count = len(lists)
    flow_id = benign_flow_count
    for k, attack in enumerate(config.attacks):
        stream_seed = derive_stream_seed(config.seed, ATTACK_STREAM_BASE + k * ATTACK_STREAM_SPAN)
        rng = SplitMix64(stream_seed)
        start_us = int(round(attack.start_s * 1_000_000))
        end_us = config.duration_us
        attacker = config.hosts_with_role("attacker")[0].addr
        if attack.kind == "syn_flood":
            lists.append(gen_syn_flood(rng, attack, start_us, end_us, attacker, flow_id))
            flow_id += 1
        elif attack.kind == "udp_flood":
            lists.append(gen_udp_flood(rng, attack, start_us, end_us, attacker, flow_id))
            flow_id += 1
        elif attack.kind == "icmp_flood":
            lists.append(gen_icmp_flood(rng, attack, start_us, end_us, attacker, flow_id))
            flow_id += 1
        elif attack.kind == "link_flood":
            flows = gen_link_flood(stream_seed, attack, start_us, end_us, flow_id)
            lists.extend(flows)
            flow_id += len(flows)
        elif attack.kind == "malformed":
            lists.append(gen_malformed(rng, attack, start_us, end_us, attacker, flow_id))
            flow_id += 1

    merged = merge_timeline(lists)
    warmup = config.warmup_us
    kept = [tf for tf in merged if tf.ts_us >= warmup]

    records = [CaptureRecord.from_timestamp(tf.ts_us, tf.frame) for tf in kept]
    labels = [tf.label for tf in kept]
    flow_ids = [tf.flow_id for tf in kept]
    meta = CaptureMeta()
    pcap_bytes = write_pcap(meta, records)
    counts = {name: 0 for name in CLASS_NAMES}
    for lab in labels:
        counts[CLASS_NAMES[lab]] += 1
    manifest = {
        "config": config_to_dict(config),
        "pcap_sha256": hashlib.sha256(pcap_bytes).hexdigest(),
        "record_count": len(records),
        "class_counts": counts,
    }
    return LabeledCapture(meta=meta, records=records, labels=labels, flow_ids=flow_ids, manifest=manifest)


def labels_jsonl(capture: LabeledCapture) -> str:
    """Sidecar: one JSON object per record, same order as the pcap."""
    lines = []
    for i, (rec, label, fid) in enumerate(zip(capture.records, capture.labels, capture.flow_ids)):
        lines.append(
            json.dumps(
                {"index": i, "ts_us": rec.timestamp_us, "label": CLASS_NAMES[label], "flow_id": fid},
                separators=(",", ":"),
            )
        )
    return "\n".join(lines) + ("\n" if lines else "")
