"""Classic pcap (libpcap) file reading and writing, bit-exact.

Only the classic microsecond format is handled: 24-byte global header, 16-byte
per-record headers. The writer always emits little-endian files with magic
0xA1B2C3D4, version 2.4, linktype 1 (Ethernet); the reader additionally accepts
byte-swapped files and normalizes them, so a swap-read-write cycle yields the
native-endian equivalent with identical record contents.

Reading and writing are sequential streaming operations: one capture, one
worker. Distinct captures may be processed concurrently.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

PCAP_MAGIC = 0xA1B2C3D4
GLOBAL_HEADER_LEN = 24
RECORD_HEADER_LEN = 16


class BadMagic(ValueError):
    """Stream does not start with a recognized classic-pcap magic."""


class TruncatedRecord(ValueError):
    """File ends mid-record. ``complete`` records were parsed successfully."""

    def __init__(self, complete: int, records: list["CaptureRecord"], meta: "CaptureMeta"):
        super().__init__(f"truncated pcap: {complete} complete records")
        self.complete = complete
        self.records = records
        self.meta = meta


class RecordTooLong(ValueError):
    """Record larger than the capture's snaplen."""


@dataclass(frozen=True)
class CaptureMeta:
    magic: int = PCAP_MAGIC
    version_major: int = 2
    version_minor: int = 4
    snaplen: int = 65535
    linktype: int = 1


@dataclass(frozen=True)
class CaptureRecord:
    ts_sec: int
    ts_usec: int
    frame: bytes
    orig_len: int = -1  # -1 means "same as incl_len"

    @property
    def incl_len(self) -> int:
        return len(self.frame)

    @property
    def effective_orig_len(self) -> int:
        return self.incl_len if self.orig_len < 0 else self.orig_len

    @property
    def timestamp_us(self) -> int:
        return self.ts_sec * 1_000_000 + self.ts_usec

    @staticmethod
    def from_timestamp(ts_us: int, frame: bytes) -> "CaptureRecord":
        return CaptureRecord(ts_sec=ts_us // 1_000_000, ts_usec=ts_us % 1_000_000, frame=frame)


def read_pcap(data: bytes) -> tuple[CaptureMeta, list[CaptureRecord]]:
    """Parse a classic pcap byte stream into (meta, records in file order)."""
    if len(data) < GLOBAL_HEADER_LEN:
        raise BadMagic("stream shorter than pcap global header")
    magic_le = struct.unpack_from("<I", data, 0)[0]
    if magic_le == PCAP_MAGIC:
        endian = "<"
    elif magic_le == 0xD4C3B2A1:  # byte-swapped file
        endian = ">"
    else:
        raise BadMagic(f"unrecognized magic 0x{magic_le:08X}")

    vmaj, vmin, _zone, _sigfigs, snaplen, linktype = struct.unpack_from(
        endian + "HHiIII", data, 4
    )
    meta = CaptureMeta(
        magic=PCAP_MAGIC,
        version_major=vmaj,
        version_minor=vmin,
        snaplen=snaplen,
        linktype=linktype,
    )

    records: list[CaptureRecord] = []
    offset = GLOBAL_HEADER_LEN
    rec_hdr = struct.Struct(endian + "IIII")
    while offset < len(data):
        if offset + RECORD_HEADER_LEN > len(data):
            raise TruncatedRecord(len(records), records, meta)
        ts_sec, ts_usec, incl_len, orig_len = rec_hdr.unpack_from(data, offset)
        offset += RECORD_HEADER_LEN
        if offset + incl_len > len(data):
            raise TruncatedRecord(len(records), records, meta)
        frame = data[offset : offset + incl_len]
        offset += incl_len
        records.append(
            CaptureRecord(
                ts_sec=ts_sec,
                ts_usec=ts_usec,
                frame=frame,
                orig_len=orig_len if orig_len != incl_len else -1,
            )
        )
    return meta, records


def write_pcap(meta: CaptureMeta, records: list[CaptureRecord]) -> bytes:
    """Serialize records to a classic little-endian pcap stream (deterministic)."""
    out = bytearray(
        struct.pack(
            "<IHHiIII",
            PCAP_MAGIC,
            meta.version_major,
            meta.version_minor,
            0,
            0,
            meta.snaplen,
            meta.linktype,
        )
    )
    for i, rec in enumerate(records):
        if rec.incl_len > meta.snaplen:
            raise RecordTooLong(
                f"record {i}: incl_len {rec.incl_len} exceeds snaplen {meta.snaplen}"
            )
        out += struct.pack(
            "<IIII", rec.ts_sec, rec.ts_usec, rec.incl_len, rec.effective_orig_len
        )
        out += rec.frame
    return bytes(out)
