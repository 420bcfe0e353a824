"""PL-1: a fixed formal language whose sentences are packets and whose words
are header-field tokens.

Every packet is rendered as at most 32 tokens in wire-field order. The
vocabulary is a closed, data-independent enumeration, so tokenization is total:
any output of ``decode_frame`` maps to in-vocabulary tokens, including
malformed packets.

Sentence layouts (fields in wire order; src before dst throughout):

    non-IPv4 or truncated IP:
        [CLS] [OTHER] [SEP]
    IPv4:
        [CLS] ip_ver ip_ihl tos ip_len_b frag ttl_b proto
              octet*4 (src) octet*4 (dst) <transport section>
              payload_b iat_b [SEP]
    transport sections:
        TCP:   [TCP] port(src) port(dst) seq_b ack_b off tcpflags win_b urg opts
        UDP:   [UDP] port(src) port(dst) udplen_b
        ICMP:  [ICMP] icmp_type icmp_code
        none:  [OTHER]

Token families and sizes (total 1696):
    specials                                   8   ([PAD] is id 0)
    ip_ver_{4,other}                           2
    ip_ihl_{5,other}                           2
    tos_{zero,nonzero}                         2
    ip_len_b0..15                             16
    frag_{none,df,mf,offset}                   4
    ttl_b0..7          (buckets of 32)         8
    proto_{icmp,tcp,udp,other}                 4
    octet_0..255       (used 8x positionally) 256
    port_0..1023, port_reg, port_eph         1026
    seq_b0..15, ack_b0..15                    32
    off_{5,other}                              2
    tcpflags_0x00..0xff                      256
    win_b0..15                                16
    urg_{zero,nonzero}                         2
    opts_{none,mss,sack,ts,multi,other}        6
    udplen_b0..15                             16
    icmp_type_{echo_req,echo_rep,unreach,other} 4
    icmp_code_{zero,nonzero}                   2
    payload_b0..15                            16
    iat_b0..15                                16

Buckets: b = min(15, floor(log2(v+1))), so v=0 lands in b0 and bucket b < 15
covers [2^b - 1, 2^(b+1) - 2]. Ports: 0-1023 exact, 1024-32767 port_reg,
32768-65535 port_eph. The inter-arrival token is the gap to the previous
packet in the same 5-tuple flow; a flow's first packet gets the sentinel
iat_b15. IP identification and all checksums are deliberately absent: checksum
validity is a grammar matter handled by validate_packet.

The Vocab is immutable and shareable; tokenize/render/detokenize are pure and
freely concurrent. Flow context (the previous timestamp) is supplied by the
caller, which keeps this module stateless; tokenize_stream is the sequential
reference for that bookkeeping.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from functools import lru_cache

from .packets import (
    IcmpHeader,
    Packet,
    TcpHeader,
    UdpHeader,
    ETHERTYPE_IPV4,
    PROTO_ICMP,
    PROTO_TCP,
    PROTO_UDP,
)

SEQ_LEN = 32

SPECIALS = ("[PAD]", "[CLS]", "[SEP]", "[MASK]", "[TCP]", "[UDP]", "[ICMP]", "[OTHER]")

PORT_EPHEMERAL_MIN = 32768  # Linux-style ephemeral range; 1024..32767 is "registered"


class MalformedSequence(ValueError):
    """TokenSeq violates the sentence structure invariants."""


def log2_bucket(v: int) -> int:
    """min(15, floor(log2(v+1))); v=0 -> 0."""
    if v < 0:
        raise ValueError("bucket input must be >= 0")
    return min(15, (v + 1).bit_length() - 1)


def bucket_range(b: int, field_max: int | None = None) -> tuple[int, int | None]:
    """Inclusive value range covered by log2 bucket ``b``."""
    lo = (1 << b) - 1
    hi: int | None = (1 << (b + 1)) - 2 if b < 15 else None
    if field_max is not None:
        hi = field_max if hi is None else min(hi, field_max)
    return lo, hi


def ttl_bucket(ttl: int) -> int:
    return ttl // 32


@dataclass(frozen=True)
class Vocab:
    """Immutable token table; construction is deterministic and data-free."""

    tokens: tuple[str, ...]
    token_to_id: dict[str, int]
    family_of: tuple[str, ...]  # family name per id
    family_sizes: dict[str, int]

    def __len__(self) -> int:
        return len(self.tokens)

    def __getitem__(self, token: str) -> int:
        return self.token_to_id[token]

    @property
    def pad_id(self) -> int:
        return self.token_to_id["[PAD]"]

    @property
    def cls_id(self) -> int:
        return self.token_to_id["[CLS]"]

    @property
    def sep_id(self) -> int:
        return self.token_to_id["[SEP]"]

    @property
    def mask_id(self) -> int:
        return self.token_to_id["[MASK]"]

    @property
    def n_specials(self) -> int:
        return len(SPECIALS)

    def is_special(self, token_id: int) -> bool:
        return token_id < len(SPECIALS)

    def export_text(self) -> str:
        """One token per line; line number == id."""
        return "\n".join(self.tokens) + "\n"

    def sha256(self) -> bytes:
        return hashlib.sha256(self.export_text().encode("utf-8")).digest()


def _families() -> list[tuple[str, list[str]]]:
    fams: list[tuple[str, list[str]]] = [("special", list(SPECIALS))]
    fams.append(("ip_ver", ["ip_ver_4", "ip_ver_other"]))
    fams.append(("ip_ihl", ["ip_ihl_5", "ip_ihl_other"]))
    fams.append(("tos", ["tos_zero", "tos_nonzero"]))
    fams.append(("ip_len", [f"ip_len_b{i}" for i in range(16)]))
    fams.append(("frag", ["frag_none", "frag_df", "frag_mf", "frag_offset"]))
    fams.append(("ttl", [f"ttl_b{i}" for i in range(8)]))
    fams.append(("proto", ["proto_icmp", "proto_tcp", "proto_udp", "proto_other"]))
    fams.append(("octet", [f"octet_{i}" for i in range(256)]))
    fams.append(("port", [f"port_{i}" for i in range(1024)] + ["port_reg", "port_eph"]))
    fams.append(("seq", [f"seq_b{i}" for i in range(16)]))
    fams.append(("ack", [f"ack_b{i}" for i in range(16)]))
    fams.append(("off", ["off_5", "off_other"]))
    fams.append(("tcpflags", [f"tcpflags_0x{i:02x}" for i in range(256)]))
    fams.append(("win", [f"win_b{i}" for i in range(16)]))
    fams.append(("urg", ["urg_zero", "urg_nonzero"]))
    fams.append(
        ("opts", ["opts_none", "opts_mss", "opts_sack", "opts_ts", "opts_multi", "opts_other"])
    )
    fams.append(("udplen", [f"udplen_b{i}" for i in range(16)]))
    fams.append(
        ("icmp_type", ["icmp_type_echo_req", "icmp_type_echo_rep", "icmp_type_unreach", "icmp_type_other"])
    )
    fams.append(("icmp_code", ["icmp_code_zero", "icmp_code_nonzero"]))
    fams.append(("payload", [f"payload_b{i}" for i in range(16)]))
    fams.append(("iat", [f"iat_b{i}" for i in range(16)]))
    return fams


@lru_cache(maxsize=1)
def build_vocabulary() -> Vocab:
    """The fixed PL-1 vocabulary. Deterministic; [PAD] is id 0."""
    tokens: list[str] = []
    family_of: list[str] = []
    family_sizes: dict[str, int] = {}
    for fam, toks in _families():
        tokens.extend(toks)
        family_of.extend([fam] * len(toks))
        family_sizes[fam] = len(toks)
    return Vocab(
        tokens=tuple(tokens),
        token_to_id={t: i for i, t in enumerate(tokens)},
        family_of=tuple(family_of),
        family_sizes=family_sizes,
    )


@dataclass(frozen=True)
class TokenSeq:
    """One packet as a fixed-length sentence of vocabulary ids."""

    ids: tuple[int, ...]
    attention_mask: tuple[bool, ...]

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def n_tokens(self) -> int:
        return sum(self.attention_mask)


def _pad_to_seq(ids: list[int], pad_id: int) -> TokenSeq:
    n = len(ids)
    assert n <= SEQ_LEN
    return TokenSeq(
        ids=tuple(ids + [pad_id] * (SEQ_LEN - n)),
        attention_mask=tuple([True] * n + [False] * (SEQ_LEN - n)),
    )


def _port_token(port: int) -> str:
    if port <= 1023:
        return f"port_{port}"
    if port < PORT_EPHEMERAL_MIN:
        return "port_reg"
    return "port_eph"


def tcp_option_kinds(options: bytes) -> tuple[list[int], bool]:
    """Option kinds present (NOP/EOL skipped); second value flags a parse error."""
    kinds: list[int] = []
    i = 0
    while i < len(options):
        kind = options[i]
        if kind == 0:  # end of options
            break
        if kind == 1:  # NOP
            i += 1
            continue
        if i + 1 >= len(options):
            return kinds, True
        length = options[i + 1]
        if length < 2 or i + length > len(options):
            return kinds, True
        kinds.append(kind)
        i += length
    return kinds, False


def _opts_token(options: bytes) -> str:
    if not options:
        return "opts_none"
    kinds, malformed = tcp_option_kinds(options)
    if malformed:
        return "opts_other"
    distinct = sorted(set(kinds))
    if not distinct:
        return "opts_none"  # only NOP/EOL padding
    if len(distinct) > 1:
        return "opts_multi"
    kind = distinct[0]
    if kind == 2:
        return "opts_mss"
    if kind in (4, 5):
        return "opts_sack"
    if kind == 8:
        return "opts_ts"
    return "opts_other"


def _icmp_type_token(t: int) -> str:
    if t == 8:
        return "icmp_type_echo_req"
    if t == 0:
        return "icmp_type_echo_rep"
    if t == 3:
        return "icmp_type_unreach"
    return "icmp_type_other"


def tokenize_packet(packet: Packet, prev_ts_us: int | None, vocab: Vocab) -> TokenSeq:
    """Render one packet as a PL-1 sentence.

    ``prev_ts_us`` is the timestamp of the previous packet in the same 5-tuple
    flow (None for a flow's first packet); flow bookkeeping is the caller's
    job, keeping this function pure. Never fails on anomalous packets.
    """
    toks = ["[CLS]"]
    ip = packet.ip
    if packet.link.ethertype != ETHERTYPE_IPV4 or ip is None:
        toks += ["[OTHER]", "[SEP]"]
        return _pad_to_seq([vocab.token_to_id[t] for t in toks], vocab.pad_id)

    toks.append("ip_ver_4" if ip.version == 4 else "ip_ver_other")
    toks.append("ip_ihl_5" if ip.ihl == 5 else "ip_ihl_other")
    toks.append("tos_zero" if ip.tos == 0 else "tos_nonzero")
    toks.append(f"ip_len_b{log2_bucket(ip.total_length)}")
    if ip.fragment_offset > 0:
        toks.append("frag_offset")
    elif ip.mf:
        toks.append("frag_mf")
    elif ip.df:
        toks.append("frag_df")
    else:
        toks.append("frag_none")
    toks.append(f"ttl_b{ttl_bucket(ip.ttl)}")
    proto_tok = {PROTO_ICMP: "proto_icmp", PROTO_TCP: "proto_tcp", PROTO_UDP: "proto_udp"}.get(
        ip.protocol, "proto_other"
    )
    toks.append(proto_tok)
    toks += [f"octet_{b}" for b in ip.src_addr]
    toks += [f"octet_{b}" for b in ip.dst_addr]

    t = packet.transport
    if isinstance(t, TcpHeader):
        toks.append("[TCP]")
        toks.append(_port_token(t.src_port))
        toks.append(_port_token(t.dst_port))
        toks.append(f"seq_b{log2_bucket(t.seq)}")
        toks.append(f"ack_b{log2_bucket(t.ack)}")
        toks.append("off_5" if t.data_offset == 5 else "off_other")
        toks.append(f"tcpflags_0x{t.flags:02x}")
        toks.append(f"win_b{log2_bucket(t.window)}")
        toks.append("urg_zero" if t.urgent_ptr == 0 else "urg_nonzero")
        toks.append(_opts_token(t.options))
    elif isinstance(t, UdpHeader):
        toks.append("[UDP]")
        toks.append(_port_token(t.src_port))
        toks.append(_port_token(t.dst_port))
        toks.append(f"udplen_b{log2_bucket(t.length)}")
    elif isinstance(t, IcmpHeader):
        toks.append("[ICMP]")
        toks.append(_icmp_type_token(t.icmp_type))
        toks.append("icmp_code_zero" if t.icmp_code == 0 else "icmp_code_nonzero")
    else:
        toks.append("[OTHER]")

    toks.append(f"payload_b{log2_bucket(packet.payload_len)}")
    if prev_ts_us is None:
        toks.append("iat_b15")
    else:
        gap = max(0, packet.timestamp_us - prev_ts_us)
        toks.append(f"iat_b{log2_bucket(gap)}")
    toks.append("[SEP]")
    return _pad_to_seq([vocab.token_to_id[t] for t in toks], vocab.pad_id)


def render_sentence(seq: TokenSeq, vocab: Vocab) -> str:
    """Space-separated token strings, pads omitted."""
    return " ".join(
        vocab.tokens[i] for i, keep in zip(seq.ids, seq.attention_mask) if keep
    )


def parse_sentence(text: str, vocab: Vocab) -> list[int]:
    """Inverse of render_sentence on non-pad ids."""
    ids = []
    for tok in text.split():
        if tok not in vocab.token_to_id:
            raise MalformedSequence(f"unknown token {tok!r}")
        ids.append(vocab.token_to_id[tok])
    return ids


def _check_structure(seq: TokenSeq, vocab: Vocab) -> list[int]:
    """Validate TokenSeq invariants; returns the non-pad ids."""
    if len(seq.ids) != SEQ_LEN or len(seq.attention_mask) != SEQ_LEN:
        raise MalformedSequence(f"sequence must have exactly {SEQ_LEN} positions")
    if any(i < 0 or i >= len(vocab) for i in seq.ids):
        raise MalformedSequence("token id out of vocabulary")
    body = [i for i, keep in zip(seq.ids, seq.attention_mask) if keep]
    if len(body) < 3 or body[0] != vocab.cls_id:
        raise MalformedSequence("sentence must start with [CLS]")
    if body.count(vocab.sep_id) != 1 or body[-1] != vocab.sep_id:
        raise MalformedSequence("sentence must end with a single [SEP]")
    n = len(body)
    tail = list(seq.ids[n:])
    if any(i != vocab.pad_id for i in tail) or any(seq.attention_mask[n:]):
        raise MalformedSequence("padding must be [PAD] with mask off")
    return body


_FIELD_MAX = {
    "ip_len": 65535,
    "seq": 2**32 - 1,
    "ack": 2**32 - 1,
    "win": 65535,
    "udplen": 65535,
    "payload": None,
    "iat": None,
}


def detokenize_fields(seq: TokenSeq, vocab: Vocab) -> dict[str, object]:
    """Recover a partial field assignment from a sentence.

    Exact families come back as values (octets, ports <= 1023, protocol
    category, tcp flags); bucketized families come back as inclusive
    (lo, hi) ranges with hi None when unbounded.
    """
    body = _check_structure(seq, vocab)
    toks = [vocab.tokens[i] for i in body]
    out: dict[str, object] = {}
    pos = 1  # after [CLS]
    if toks[pos] == "[OTHER]":
        out["layer"] = "other"
        return out

    def fam(p: int) -> str:
        return vocab.family_of[body[p]]

    expect_ip = ["ip_ver", "ip_ihl", "tos", "ip_len", "frag", "ttl", "proto"]
    for name in expect_ip:
        if pos >= len(toks) or fam(pos) != name:
            raise MalformedSequence(f"expected {name} token at position {pos}")
        pos += 1
    out["layer"] = "ipv4"
    out["ip.version"] = 4 if toks[1] == "ip_ver_4" else None
    out["ip.ihl"] = 5 if toks[2] == "ip_ihl_5" else None
    out["ip.tos"] = 0 if toks[3] == "tos_zero" else (1, 255)
    out["ip.total_length"] = bucket_range(int(toks[4].rsplit("b", 1)[1]), _FIELD_MAX["ip_len"])
    out["ip.frag"] = toks[5].split("_", 1)[1]
    ttl_b = int(toks[6].rsplit("b", 1)[1])
    out["ip.ttl"] = (ttl_b * 32, ttl_b * 32 + 31)
    out["ip.protocol"] = toks[7].split("_", 1)[1]

    for key, base in (("ip.src_addr", pos), ("ip.dst_addr", pos + 4)):
        octets = []
        for k in range(4):
            if fam(base + k) != "octet":
                raise MalformedSequence(f"expected octet token at position {base + k}")
            octets.append(int(toks[base + k].split("_", 1)[1]))
        out[key] = bytes(octets)
    pos += 8

    marker = toks[pos]
    pos += 1

    def port_value(tok: str) -> object:
        if tok == "port_reg":
            return (1024, PORT_EPHEMERAL_MIN - 1)
        if tok == "port_eph":
            return (PORT_EPHEMERAL_MIN, 65535)
        return int(tok.split("_", 1)[1])

    if marker == "[TCP]":
        out["transport"] = "tcp"
        out["tcp.src_port"] = port_value(toks[pos])
        out["tcp.dst_port"] = port_value(toks[pos + 1])
        out["tcp.seq"] = bucket_range(int(toks[pos + 2].rsplit("b", 1)[1]), _FIELD_MAX["seq"])
        out["tcp.ack"] = bucket_range(int(toks[pos + 3].rsplit("b", 1)[1]), _FIELD_MAX["ack"])
        out["tcp.data_offset"] = 5 if toks[pos + 4] == "off_5" else None
        out["tcp.flags"] = int(toks[pos + 5].rsplit("x", 1)[1], 16)
        out["tcp.window"] = bucket_range(int(toks[pos + 6].rsplit("b", 1)[1]), _FIELD_MAX["win"])
        out["tcp.urgent_ptr"] = 0 if toks[pos + 7] == "urg_zero" else (1, 65535)
        out["tcp.options"] = toks[pos + 8].split("_", 1)[1]
        pos += 9
    elif marker == "[UDP]":
        out["transport"] = "udp"
        out["udp.src_port"] = port_value(toks[pos])
        out["udp.dst_port"] = port_value(toks[pos + 1])
        out["udp.length"] = bucket_range(int(toks[pos + 2].rsplit("b", 1)[1]), _FIELD_MAX["udplen"])
        pos += 3
    elif marker == "[ICMP]":
        out["transport"] = "icmp"
        out["icmp.type"] = toks[pos].split("icmp_type_", 1)[1]
        out["icmp.code"] = 0 if toks[pos + 1] == "icmp_code_zero" else (1, 255)
        pos += 2
    elif marker == "[OTHER]":
        out["transport"] = "other"
    else:
        raise MalformedSequence(f"expected transport marker, got {marker!r}")

    if pos + 3 != len(toks) or fam(pos) != "payload" or fam(pos + 1) != "iat":
        raise MalformedSequence("expected payload, iat, [SEP] at sentence end")
    out["payload_len"] = bucket_range(int(toks[pos].rsplit("b", 1)[1]), None)
    iat_b = int(toks[pos + 1].rsplit("b", 1)[1])
    out["iat_us"] = bucket_range(iat_b, None)
    return out


def flow_key(packet: Packet) -> tuple | None:
    """5-tuple used for inter-arrival context; None when there is no IP layer."""
    if packet.ip is None:
        return None
    t = packet.transport
    if isinstance(t, (TcpHeader, UdpHeader)):
        ports = (t.src_port, t.dst_port)
    else:
        ports = (0, 0)
    return (packet.ip.src_addr, packet.ip.dst_addr, packet.ip.protocol) + ports


def tokenize_stream(packets, vocab: Vocab):
    """Tokenize packets in capture order, tracking per-flow previous timestamps."""
    last_ts: dict[tuple, int] = {}
    out = []
    for p in packets:
        key = flow_key(p)
        prev = last_ts.get(key) if key is not None else None
        out.append(tokenize_packet(p, prev, vocab))
        if key is not None:
            last_ts[key] = p.timestamp_us
    return out
