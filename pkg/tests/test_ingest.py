import math
import struct

import dpkt
import numpy as np
import pytest
from hypothesis import given, strategies as st

from flowvision.ingest import (
    ACK, FIN, L4, PSH, SYN, PacketBatch, PacketRecord, TraceFormatError, featurize, load_csv, load_trace,
    protocol_mask, protocol_masks, read_csv, read_pcap, write_csv, write_pcap,
)
from flowvision.synth import SCENARIOS, gen_synthetic, read_sidecar, UnknownScenario

HEADER = "ts,src,dst,sport,dport,proto,flags,len\n"


def _write(tmp_path, body, name="t.csv"):
    p = tmp_path / name
    p.write_text(HEADER + body)
    return p


# --------------------------------------------------------------------------- CSV


def test_csv_row_maps_fields(tmp_path):
    p = _write(tmp_path, "1.5,10.0.0.1,10.0.0.2,1234,22,TCP,0x02,60\n")
    (rec,) = list(read_csv(p))
    assert rec == PacketRecord(1.5, "10.0.0.1", "10.0.0.2", 1234, 22, L4.TCP, SYN, 60)


def test_csv_unknown_proto_is_other(tmp_path, caplog):
    p = _write(tmp_path, "1.0,10.0.0.1,10.0.0.2,0,0,GRE,0,80\n")
    (rec,) = list(read_csv(p))
    assert rec.l4_protocol == L4.OTHER
    assert "GRE" in caplog.text
    assert load_csv(p).proto.tolist() == [L4.OTHER]


def test_csv_header_only_is_empty(tmp_path):
    p = _write(tmp_path, "")
    assert list(read_csv(p)) == []
    assert len(load_csv(p)) == 0


@pytest.mark.parametrize("row, fragment", [
    ("1.0,10.0.0.1,10.0.0.2,1,2,TCP,0x02\n", "expected 8 fields"),
    ("x,10.0.0.1,10.0.0.2,1,2,TCP,0x02,60\n", "line 3"),
    ("1.0,10.0.0.1,10.0.0.2,1,2,UDP,0x02,60\n", "tcp_flags"),
    ("1.0,10.0.0.1,10.0.0.2,1,2,TCP,0,0\n", "length"),
    ("1.0,not-an-ip,10.0.0.2,1,2,TCP,0,60\n", "line 3"),
])
def test_csv_malformed_row_names_line(tmp_path, row, fragment):
    p = _write(tmp_path, "1.0,10.0.0.1,10.0.0.2,1,2,TCP,0x10,60\n" + row)
    with pytest.raises(TraceFormatError, match=fragment):
        list(read_csv(p))
    with pytest.raises(TraceFormatError, match="line 3"):
        load_csv(p)


def test_csv_bad_header(tmp_path):
    p = tmp_path / "t.csv"
    p.write_text("a,b,c\n")
    with pytest.raises(TraceFormatError, match="header"):
        list(read_csv(p))


def test_load_trace_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_trace(tmp_path / "nope.csv")


records_st = st.lists(
    st.tuples(
        st.floats(0, 2e9, allow_nan=False),
        st.sampled_from(["10.0.0.1", "192.168.1.7", "2001:db8::1", "10.0.0.2"]),
        st.sampled_from(["10.0.0.3", "8.8.8.8", "2001:db8::2"]),
        st.integers(0, 65535), st.integers(0, 65535),
        st.sampled_from(list(L4)), st.integers(0, 255), st.integers(1, 65535),
    ).map(lambda t: PacketRecord(t[0], t[1], t[2], t[3], t[4], t[5], t[6] if t[5] == L4.TCP else 0, t[7])),
    max_size=30,
)


@given(records_st)
def test_csv_round_trip_exact(tmp_path_factory, recs):
    p = tmp_path_factory.mktemp("rt") / "t.csv"
    write_csv(recs, p)
    assert list(read_csv(p)) == recs
    assert list(load_csv(p).records()) == recs


# --------------------------------------------------------------------------- features


def test_featurize_first_packet():
    pkt = PacketRecord(3.0, "a", "b", 1, 2, L4.TCP, SYN | ACK, 60)
    f = featurize(pkt)
    assert f.protocol_mask == 0b1 | (SYN | ACK) << 8
    assert f.interval == 0.0 and f.length == 60


def test_featurize_udp_interval():
    f = featurize(PacketRecord(2.0, "a", "b", 1, 2, L4.UDP, 0, 100), 1.25)
    assert f.protocol_mask == 0b10
    assert f.interval == 0.75


def test_featurize_icmp_has_no_flag_bits():
    f = featurize(PacketRecord(2.0, "a", "b", 0, 0, L4.ICMP, 0, 84))
    assert f.protocol_mask == 0b100
    assert f.protocol_mask >> 8 == 0


@given(st.sampled_from(list(L4)), st.integers(0, 255))
def test_mask_has_one_protocol_bit(proto, flags):
    flags = flags if proto == L4.TCP else 0
    m = protocol_mask(proto, flags)
    assert bin(m & 0xF).count("1") == 1
    assert protocol_masks(np.array([proto]), np.array([flags]))[0] == m


@given(st.lists(st.floats(0, 1e6, allow_nan=False), min_size=1, max_size=40))
def test_intervals_sum_to_duration(ts):
    ts = sorted(ts)
    prev = None
    total = 0.0
    for t in ts:
        total += featurize(PacketRecord(t, "a", "b", 1, 2, L4.UDP, 0, 10), prev).interval
        prev = t
    assert abs(total - (ts[-1] - ts[0])) <= 1e-9 * max(1.0, ts[-1])


# --------------------------------------------------------------------------- PCAP


def _pcap(tmp_path, frames, linktype=dpkt.pcap.DLT_EN10MB, name="c.pcap"):
    p = tmp_path / name
    with open(p, "wb") as fh:
        w = dpkt.pcap.Writer(fh, linktype=linktype)
        for ts, buf in frames:
            w.writepkt(buf, ts=ts)
    return p


def _eth(ethertype, payload):
    return b"\x00" * 12 + struct.pack("!H", ethertype) + payload


def test_pcap_empty_capture(tmp_path):
    s = read_pcap(_pcap(tmp_path, []))
    assert list(s) == []
    assert s.skipped == 0


def test_pcap_single_syn(tmp_path):
    tcp = dpkt.tcp.TCP(sport=40000, dport=443, flags=dpkt.tcp.TH_SYN, off=5, data=b"\x00" * 20)
    ip = dpkt.ip.IP(src=bytes([10, 0, 0, 1]), dst=bytes([10, 0, 0, 2]), p=6, data=tcp)
    raw = bytes(ip)
    s = read_pcap(_pcap(tmp_path, [(1.25, _eth(0x0800, raw))]))
    (rec,) = list(s)
    assert rec.l4_protocol == L4.TCP and rec.tcp_flags & SYN
    assert (rec.src_addr, rec.dst_addr, rec.src_port, rec.dst_port, rec.length) == ("10.0.0.1", "10.0.0.2", 40000, 443, 60)


def test_pcap_arp_is_skipped(tmp_path):
    s = read_pcap(_pcap(tmp_path, [(1.0, _eth(0x0806, b"\x00" * 28))]))
    assert list(s) == []
    assert s.skipped == 1


def test_pcap_truncated_frame_counted(tmp_path):
    s = read_pcap(_pcap(tmp_path, [(1.0, _eth(0x0800, b"\x45\x00"))]))
    assert list(s) == []
    assert s.truncated == 1


def test_pcap_not_a_capture(tmp_path):
    p = tmp_path / "junk.pcap"
    p.write_bytes(b"definitely not a capture file")
    with pytest.raises(TraceFormatError):
        list(read_pcap(p))


def test_pcap_round_trip_matches_csv(tmp_path):
    recs = [
        PacketRecord(1.000001, "10.0.0.1", "10.0.0.2", 1234, 22, L4.TCP, SYN, 60),
        PacketRecord(1.5, "10.0.0.2", "10.0.0.1", 22, 1234, L4.TCP, SYN | ACK, 60),
        PacketRecord(2.0, "10.0.0.1", "10.0.0.2", 1234, 22, L4.TCP, PSH | ACK | FIN, 1500),
        PacketRecord(2.25, "2001:db8::1", "2001:db8::2", 53, 5353, L4.UDP, 0, 120),
        PacketRecord(3.0, "10.0.0.9", "10.0.0.1", 0, 0, L4.ICMP, 0, 84),
        PacketRecord(4.0, "10.0.0.9", "10.0.0.1", 0, 0, L4.OTHER, 0, 64),
    ]
    p = tmp_path / "r.pcap"
    write_pcap(recs, p)
    got = list(read_pcap(p))
    assert [r._replace(timestamp=round(r.timestamp, 6)) for r in got] == recs


def test_raw_ip_linktype(tmp_path):
    udp = dpkt.udp.UDP(sport=1, dport=2)
    ip = dpkt.ip.IP(src=bytes([1, 2, 3, 4]), dst=bytes([5, 6, 7, 8]), p=17, data=udp)
    s = read_pcap(_pcap(tmp_path, [(5.0, bytes(ip))], linktype=101))
    (rec,) = list(s)
    assert rec.l4_protocol == L4.UDP and rec.src_addr == "1.2.3.4"


# --------------------------------------------------------------------------- batches


def test_batch_from_records_round_trip():
    recs = [PacketRecord(float(i), f"10.0.0.{i % 3}", "10.0.0.9", i, 80, L4.TCP, ACK, 40 + i) for i in range(7)]
    b = PacketBatch.from_records(recs)
    assert len(b) == 7 and list(b.records()) == recs
    assert sum(len(c) for c in b.chunks(3)) == 7


# --------------------------------------------------------------------------- synthetic traces


def test_synthetic_is_deterministic(tmp_path):
    a, b = gen_synthetic("benign-web", 42), gen_synthetic("benign-web", 42)
    a.write(tmp_path / "a.csv", tmp_path / "a.lab")
    b.write(tmp_path / "b.csv", tmp_path / "b.lab")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    assert (tmp_path / "a.lab").read_bytes() == (tmp_path / "b.lab").read_bytes()


def test_synthetic_seeds_differ():
    assert not np.array_equal(gen_synthetic("benign-web", 1).batch.ts, gen_synthetic("benign-web", 2).batch.ts)


def test_ssh_crack_shape(tmp_path):
    tr = gen_synthetic("ssh-crack", 7)
    tr.write(tmp_path / "t.csv", tmp_path / "t.lab")
    labels = read_sidecar(tmp_path / "t.lab")
    attack = [k for k, v in labels.items() if v == "attack" and k.dst_port == 22]
    by_src = {}
    for k in attack:
        by_src.setdefault(k.src_addr, []).append(k)
    assert max(len(v) for v in by_src.values()) >= 20


def test_spoof_flood_shape():
    tr = gen_synthetic("spoof-flood", 7)
    attack = [k for k, v in tr.labels.items() if v == "attack"]
    by_dst = {}
    for k in attack:
        by_dst.setdefault(k.dst_addr, set()).add(k.src_addr)
    assert max(len(v) for v in by_dst.values()) >= 1000


def test_benign_web_has_no_attack_labels():
    assert set(gen_synthetic("benign-web", 3).labels.values()) == {"benign"}


@pytest.mark.parametrize("scenario", SCENARIOS)
def test_every_scenario_labels_every_flow(scenario):
    tr = gen_synthetic(scenario, 0)
    b = tr.batch
    keys = {(b.addrs[s], b.addrs[d], sp, dp) for s, d, sp, dp in
            zip(b.src.tolist(), b.dst.tolist(), b.sport.tolist(), b.dport.tolist())}
    assert keys == {tuple(k) for k in tr.labels}
    assert np.all(np.diff(b.ts) >= 0)
    for r in list(tr)[:200]:
        r.validate()


def test_unknown_scenario():
    with pytest.raises(UnknownScenario):
        gen_synthetic("teardrop", 0)
