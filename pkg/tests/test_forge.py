import json

import pytest

from sentinel import CLASS_TO_ID
from sentinel.forge import (
    AttackSpec,
    BenignProfile,
    FlowSpec,
    Host,
    InvalidConfig,
    ScenarioConfig,
    TimedFrame,
    config_from_dict,
    config_to_dict,
    default_scenario,
    forge,
    gen_benign_flow,
    gen_link_flood,
    gen_malformed,
    gen_syn_flood,
    gen_udp_flood,
    gen_icmp_flood,
    labels_jsonl,
    merge_timeline,
    MALFORMED_VARIANTS,
)
from sentinel.packets import (
    Anomaly,
    TCP_ACK,
    TCP_SYN,
    IcmpHeader,
    TcpHeader,
    UdpHeader,
    decode_frame,
    encode_packet,
    parse_ip,
    validate_packet,
)
from sentinel.rng import SplitMix64


def small_scenario(seed=7, benign=True, attacks=()):
    hosts = (
        Host(parse_ip("10.0.1.1"), "client"),
        Host(parse_ip("10.0.1.2"), "client"),
        Host(parse_ip("10.0.0.2"), "server"),
        Host(parse_ip("10.0.9.1"), "attacker"),
        Host(parse_ip("10.0.0.9"), "bottleneck"),
    )
    return ScenarioConfig(
        seed=seed,
        duration_s=4.0,
        warmup_s=1.0,
        hosts=hosts,
        benign=BenignProfile(flow_rate=20.0) if benign else None,
        attacks=tuple(attacks),
    )


def syn_attack(rate=500.0, **kw):
    args = dict(kind="syn_flood", rate=rate, target_addr=parse_ip("10.0.0.2"))
    args.update(kw)
    return AttackSpec(**args)


class TestConfig:
    def test_round_trip_through_json(self):
        config = default_scenario()
        doc = json.loads(json.dumps(config_to_dict(config)))
        assert config_from_dict(doc) == config

    def test_shipped_default_config_matches_code(self):
        import os

        path = os.path.join(os.path.dirname(__file__), "..", "configs", "default_scenario.json")
        doc = json.loads(open(path).read())
        assert config_from_dict(doc) == default_scenario()

    def test_unknown_key_rejected_with_path(self):
        doc = config_to_dict(default_scenario())
        doc["attacks"][0]["kindd"] = "x"
        with pytest.raises(InvalidConfig) as exc:
            config_from_dict(doc)
        assert "attacks[0].kindd" in str(exc.value)

    def test_warmup_must_precede_duration(self):
        doc = config_to_dict(default_scenario())
        doc["warmup_s"] = 99.0
        with pytest.raises(InvalidConfig) as exc:
            config_from_dict(doc)
        assert "warmup_s" in str(exc.value)

    def test_attack_requires_attacker_host(self):
        doc = config_to_dict(default_scenario())
        doc["hosts"] = [h for h in doc["hosts"] if h["role"] != "attacker"]
        with pytest.raises(InvalidConfig):
            config_from_dict(doc)

    def test_bad_rate_rejected(self):
        doc = config_to_dict(default_scenario())
        doc["attacks"][0]["rate"] = -5
        with pytest.raises(InvalidConfig) as exc:
            config_from_dict(doc)
        assert "attacks[0].rate" in str(exc.value)


class TestBenignFlow:
    def spec(self, sizes=(), **kw):
        args = dict(
            client=parse_ip("10.0.1.1"),
            server=parse_ip("10.0.0.2"),
            src_port=40000,
            dst_port=80,
            start_us=0,
            end_us=10**9,
            segment_sizes=tuple(sizes),
        )
        args.update(kw)
        return FlowSpec(**args)

    def test_zero_payload_flow_is_6_packets(self):
        pkts = gen_benign_flow(SplitMix64(1), self.spec())
        assert len(pkts) == 6  # SYN, SYN+ACK, ACK, FIN, FIN+ACK, ACK

    def test_lifecycle_packet_count(self):
        pkts = gen_benign_flow(SplitMix64(1), self.spec(sizes=(100, 50, 7)))
        assert len(pkts) == 6 + 2 * 3

    def test_all_packets_validate_clean(self):
        for seed in range(5):
            for tf in gen_benign_flow(SplitMix64(seed), self.spec(sizes=(200, 900))):
                assert validate_packet(decode_frame(tf.frame)) == []

    def test_cumulative_seq_arithmetic(self):
        sizes = (100, 200, 50)
        pkts = gen_benign_flow(SplitMix64(3), self.spec(sizes=sizes))
        syn = decode_frame(pkts[0].frame).transport
        isn = syn.seq
        data = [decode_frame(tf.frame).transport for tf in pkts[3:3 + 6:2]]
        sent = 0
        for k, t in enumerate(data):
            assert t.seq == (isn + 1 + sent) & 0xFFFFFFFF  # ISN + 1 + bytes before
            sent += sizes[k]

    def test_handshake_flags_and_options(self):
        pkts = gen_benign_flow(SplitMix64(9), self.spec(sizes=(10,)))
        t0 = decode_frame(pkts[0].frame).transport
        t1 = decode_frame(pkts[1].frame).transport
        assert t0.flags == TCP_SYN and t0.options[:1] == b"\x02"
        assert t1.flags == TCP_SYN | TCP_ACK
        assert t0.window >= 8192

    def test_timestamps_increase(self):
        pkts = gen_benign_flow(SplitMix64(5), self.spec(sizes=(10, 20)))
        times = [tf.ts_us for tf in pkts]
        assert times == sorted(times) and len(set(times)) == len(times)


class TestFloods:
    def run_gen(self, gen, attack, seed=11, span=(0, 2_000_000)):
        rng = SplitMix64(seed)
        return gen(rng, attack, span[0], span[1], parse_ip("10.0.9.1"), 0)

    def test_syn_flood_all_bare_syn(self):
        pkts = self.run_gen(gen_syn_flood, syn_attack(rate=1000))
        assert len(pkts) == 2000  # floor(rate * span)
        for tf in pkts[:200]:
            t = decode_frame(tf.frame).transport
            assert t.flags == TCP_SYN
            assert t.window <= 1024
            assert t.options == b""
            assert t.dst_port == 80

    def test_syn_flood_spoofing_distinct_sources(self):
        pkts = self.run_gen(gen_syn_flood, syn_attack(rate=5000), span=(0, 2_000_000))
        srcs = {decode_frame(tf.frame).ip.src_addr for tf in pkts}
        assert len(srcs) >= 0.99 * len(pkts)

    def test_syn_flood_no_spoofing_uses_attacker(self):
        pkts = self.run_gen(gen_syn_flood, syn_attack(rate=100, spoofing=False))
        srcs = {decode_frame(tf.frame).ip.src_addr for tf in pkts}
        assert srcs == {parse_ip("10.0.9.1")}

    def test_udp_flood_volumetric_payloads(self):
        attack = AttackSpec(kind="udp_flood", rate=500, target_addr=parse_ip("10.0.0.2"), target_port=53)
        pkts = self.run_gen(gen_udp_flood, attack)
        assert len(pkts) == 1000
        for tf in pkts[:100]:
            p = decode_frame(tf.frame)
            assert isinstance(p.transport, UdpHeader)
            assert 1024 <= p.payload_len <= 1400
            assert tf.label == CLASS_TO_ID["volumetric"]
            assert validate_packet(p) == []

    def test_icmp_flood_echo_requests(self):
        attack = AttackSpec(kind="icmp_flood", rate=300, target_addr=parse_ip("10.0.0.2"))
        pkts = self.run_gen(gen_icmp_flood, attack)
        for tf in pkts[:100]:
            p = decode_frame(tf.frame)
            assert isinstance(p.transport, IcmpHeader)
            assert p.transport.icmp_type == 8
            assert tf.label == CLASS_TO_ID["volumetric"]

    def test_rate_model_floor(self):
        pkts = self.run_gen(gen_syn_flood, syn_attack(rate=333), span=(0, 3_000_000))
        assert len(pkts) == 999


class TestLinkFlood:
    def test_flows_validate_clean_and_converge(self):
        attack = AttackSpec(kind="link_flood", rate=20, per_flow_rate=2.0,
                            target_addr=parse_ip("10.0.0.9"))
        flows = gen_link_flood(123, attack, 0, 3_000_000, flow_id_base=50)
        assert len(flows) == 10
        for flow in flows:
            for tf in flow:
                p = decode_frame(tf.frame)
                assert validate_packet(p) == []
                assert tf.label == CLASS_TO_ID["protocol"]
                ip = p.ip
                assert parse_ip("10.0.0.9") in (ip.src_addr, ip.dst_addr)

    def test_per_flow_rate_ceiling(self):
        attack = AttackSpec(kind="link_flood", rate=20, per_flow_rate=2.0,
                            target_addr=parse_ip("10.0.0.9"))
        span_s = 5.0
        flows = gen_link_flood(99, attack, 0, int(span_s * 1e6), flow_id_base=0)
        for flow in flows:
            data = [tf for tf in flow if decode_frame(tf.frame).transport.flags == (TCP_ACK | 0x08)]
            assert len(data) / span_s <= attack.per_flow_rate + 0.01

    def test_aggregate_rate_within_5_percent(self):
        attack = AttackSpec(kind="link_flood", rate=100, per_flow_rate=2.0,
                            target_addr=parse_ip("10.0.0.9"))
        span_s = 10.0
        flows = gen_link_flood(7, attack, 0, int(span_s * 1e6), flow_id_base=0)
        # steady-state window: skip the first 2s (ramp + handshakes)
        total = sum(1 for flow in flows for tf in flow if tf.ts_us >= 2_000_000)
        measured = total / (span_s - 2.0)
        expected = len(flows) * attack.per_flow_rate
        assert abs(measured - expected) / expected < 0.05


class TestMalformed:
    def gen(self, rate=600, span=(0, 1_000_000), seed=5):
        attack = AttackSpec(kind="malformed", rate=rate, target_addr=parse_ip("10.0.0.2"))
        return gen_malformed(SplitMix64(seed), attack, span[0], span[1], parse_ip("10.0.9.1"), 0)

    def test_every_packet_has_an_anomaly(self):
        for tf in self.gen():
            assert validate_packet(decode_frame(tf.frame)) != []
            assert tf.label == CLASS_TO_ID["vulnerability"]

    def test_rotation_is_round_robin(self):
        pkts = self.gen(rate=12)
        expected_cycle = [
            [Anomaly.ILLEGAL_TCP_FLAGS],  # syn_fin
            [Anomaly.ILLEGAL_TCP_FLAGS],  # zero flags
            [Anomaly.ILLEGAL_TCP_FLAGS],  # all flags
            [Anomaly.BAD_IHL],
            [Anomaly.BAD_IP_CHECKSUM],
            [Anomaly.TRUNCATED_HEADER],
        ]
        got = [validate_packet(decode_frame(tf.frame)) for tf in pkts]
        assert got == expected_cycle * 2

    def test_bad_checksum_differs_only_in_checksum_field(self):
        pkts = self.gen(rate=12)
        bad = decode_frame(pkts[4].frame)  # 5th variant in rotation
        fixed = encode_packet(bad, normalize=True)
        diff = [i for i, (a, b) in enumerate(zip(pkts[4].frame, fixed)) if a != b]
        assert diff != [] and all(i in (24, 25) for i in diff)

    def test_round_trip_even_when_malformed(self):
        for tf in self.gen():
            assert encode_packet(decode_frame(tf.frame)) == tf.frame


class TestMergeTimeline:
    def tf(self, ts, tag=0):
        return TimedFrame(ts, b"\x00" * 14, 0, tag)

    def test_disjoint_lists_concatenate(self):
        a = [self.tf(1), self.tf(2)]
        b = [self.tf(10), self.tf(11)]
        assert merge_timeline([a, b]) == a + b

    def test_merge_is_permutation(self):
        a = [self.tf(5), self.tf(8)]
        b = [self.tf(1), self.tf(9)]
        merged = merge_timeline([a, b])
        assert sorted(tf.ts_us for tf in merged) == [1, 5, 8, 9]
        assert len(merged) == 4

    def test_equal_timestamps_keep_list_priority(self):
        a = [self.tf(5, tag=1)]
        b = [self.tf(5, tag=2)]
        merged = merge_timeline([a, b])
        assert [tf.flow_id for tf in merged] == [1, 2]


class TestForge:
    def test_deterministic_content_hash(self):
        config = small_scenario(attacks=[syn_attack()])
        a, b = forge(config), forge(config)
        assert a.manifest["pcap_sha256"] == b.manifest["pcap_sha256"]
        assert a.pcap_bytes == b.pcap_bytes
        assert a.labels == b.labels

    def test_no_attack_all_benign(self):
        cap = forge(small_scenario())
        assert set(cap.labels) == {CLASS_TO_ID["benign"]}
        assert cap.manifest["class_counts"]["volumetric"] == 0

    def test_rate_accuracy_post_warmup(self):
        config = small_scenario(benign=False, attacks=[syn_attack(rate=1000)])
        cap = forge(config)
        n_protocol = cap.manifest["class_counts"]["protocol"]
        # 3s post-warmup window at 1000 pkts/s
        assert abs(n_protocol - 3000) <= 0.02 * 3000

    def test_warmup_trimmed_and_sorted(self):
        cap = forge(small_scenario(attacks=[syn_attack()]))
        times = [r.timestamp_us for r in cap.records]
        assert min(times) >= 1_000_000
        assert times == sorted(times)

    def test_labels_align_with_records(self):
        cap = forge(small_scenario(attacks=[syn_attack()]))
        assert len(cap.labels) == len(cap.records) == len(cap.flow_ids)
        counts = cap.manifest["class_counts"]
        assert sum(counts.values()) == len(cap.records)

    def test_label_soundness(self):
        config = small_scenario(
            attacks=[
                syn_attack(rate=200),
                AttackSpec(kind="malformed", rate=200, target_addr=parse_ip("10.0.0.2")),
                AttackSpec(kind="link_flood", rate=20, target_addr=parse_ip("10.0.0.9")),
            ]
        )
        cap = forge(config)
        for rec, label in zip(cap.records, cap.labels):
            anomalies = validate_packet(decode_frame(rec.frame))
            if label == CLASS_TO_ID["vulnerability"]:
                assert anomalies != []
            else:
                assert anomalies == []

    def test_codec_round_trip_on_forge_output(self):
        cap = forge(small_scenario(attacks=[syn_attack(), AttackSpec(kind="malformed", rate=100, target_addr=parse_ip("10.0.0.2"))]))
        for rec in cap.records:
            p = decode_frame(rec.frame, rec.timestamp_us)
            assert encode_packet(p) == rec.frame

    def test_labels_jsonl_schema(self):
        cap = forge(small_scenario(attacks=[syn_attack(rate=50)]))
        lines = labels_jsonl(cap).splitlines()
        assert len(lines) == len(cap.records)
        row = json.loads(lines[0])
        assert set(row) == {"index", "ts_us", "label", "flow_id"}
        assert row["index"] == 0
