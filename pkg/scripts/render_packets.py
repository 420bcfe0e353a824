#!/usr/bin/env python3
"""Print each packet of a pcap as its token sentence plus any grammar anomalies.

Usage: python scripts/render_packets.py capture.pcap [--limit N]
"""

import argparse

from sentinel.lang import build_vocabulary, flow_key, render_sentence, tokenize_packet
from sentinel.packets import decode_frame, validate_packet
from sentinel.pcap import read_pcap


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("pcap")
    ap.add_argument("--limit", type=int, default=20)
    args = ap.parse_args()

    vocab = build_vocabulary()
    _, records = read_pcap(open(args.pcap, "rb").read())
    last_ts = {}
    for i, rec in enumerate(records[: args.limit]):
        packet = decode_frame(rec.frame, rec.timestamp_us)
        key = flow_key(packet)
        prev = last_ts.get(key) if key is not None else None
        seq = tokenize_packet(packet, prev, vocab)
        if key is not None:
            last_ts[key] = packet.timestamp_us
        anomalies = ",".join(a.value for a in validate_packet(packet)) or "-"
        print(f"#{i:<6} t={rec.timestamp_us:<12} [{anomalies}]")
        print(f"        {render_sentence(seq, vocab)}")


if __name__ == "__main__":
    main()
