"""Deterministic synthetic traces: benign web background plus labeled attacks.

Traffic is first described as a table of connections (client, server, ports,
start time, packet counts per direction, ...) and then expanded to packets
with numpy.  Every connection contributes a forward flow and, when it has
reverse packets, a reverse flow; both carry the connection's label.
"""

from __future__ import annotations

import csv
import ipaddress
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

from flowvision.flowtable import FlowKey
from flowvision.ingest import ACK, FIN, L4, PSH, RST, SYN, PacketBatch, PacketRecord, write_csv

BENIGN, ATTACK = "benign", "attack"
EPOCH = 1_700_000_000
TRACE_SECONDS = 40.0

SCENARIOS = ("benign-web", "brute-scan", "spoof-flood", "ssh-crack", "lowrate-probe", "botnet-c2",
             "obfuscated-crack")

# Connection kinds.
K_TCP, K_UDP, K_ICMP, K_PROBE = 0, 1, 2, 3


class UnknownScenario(ValueError):
    pass


class _Addrs:
    def __init__(self):
        self.names: list[str] = []
        self.index: dict[str, int] = {}

    def code(self, name: str) -> int:
        c = self.index.get(name)
        if c is None:
            c = self.index[name] = len(self.names)
            self.names.append(name)
        return c

    def codes(self, names) -> np.ndarray:
        return np.asarray([self.code(n) for n in names], dtype=np.int32)

    def from_ints(self, values: np.ndarray) -> np.ndarray:
        return self.codes(str(ipaddress.IPv4Address(int(v))) for v in values)


def _block(base: str, rng: np.random.Generator, n: int, span: int = 1 << 16) -> np.ndarray:
    """n distinct addresses drawn from the block starting at ``base``."""
    start = int(ipaddress.IPv4Address(base))
    return start + rng.choice(span, size=n, replace=False)


@dataclass
class _Conns:
    """Columnar connection table."""

    cols: dict[str, list[np.ndarray]] = field(default_factory=dict)

    NAMES = ("client", "server", "cport", "sport", "kind", "start", "n_fwd", "n_rev", "gap", "fwd_len",
             "rev_len", "resp_flags", "label")

    def add(self, **kw) -> None:
        n = max(np.size(v) for v in kw.values())
        for name in self.NAMES:
            v = kw.get(name, 0)
            arr = np.broadcast_to(np.asarray(v), (n,)).copy()
            self.cols.setdefault(name, []).append(arr)

    def table(self) -> dict[str, np.ndarray]:
        return {k: np.concatenate(v) for k, v in self.cols.items()}


def _ports(rng: np.random.Generator, n: int) -> np.ndarray:
    return rng.integers(1024, 65536, size=n)


def _sequential_ports(rng: np.random.Generator, n: int) -> np.ndarray:
    base = int(rng.integers(20000, 40000))
    return 1024 + (base + np.arange(n)) % (65536 - 1024)


def _benign_web(conns: _Conns, addrs: _Addrs, rng: np.random.Generator, scale: float, duration: float
                ) -> np.ndarray:
    n_clients = max(5, int(round(150 * scale)))
    n_servers = max(4, int(round(20 * np.sqrt(scale))))
    clients = addrs.from_ints(_block("10.1.0.0", rng, n_clients))
    servers = addrs.from_ints(_block("172.16.0.0", rng, n_servers, 1 << 12))
    resolver = addrs.code("172.16.255.53")
    weights = 1.0 / np.arange(1, n_servers + 1) ** 0.8
    weights /= weights.sum()

    n_sess = int(rng.poisson(n_clients * 0.2 * duration))
    who = clients[rng.integers(0, n_clients, n_sess)]
    where = servers[rng.choice(n_servers, size=n_sess, p=weights)]
    start = rng.uniform(0.2, duration - 2.0, n_sess)
    long_ = rng.random(n_sess) < 0.05
    n_rev = np.where(long_, rng.integers(20, 200, n_sess), rng.integers(3, 9, n_sess))
    n_fwd = np.where(long_, np.maximum(16, n_rev // 2), rng.integers(3, 9, n_sess))
    conns.add(client=who, server=where, cport=_ports(rng, n_sess),
              sport=np.where(rng.random(n_sess) < 0.8, 443, 80), kind=K_TCP, start=start,
              n_fwd=n_fwd, n_rev=n_rev, gap=np.where(long_, rng.uniform(0.005, 0.02, n_sess),
                                                     rng.uniform(0.02, 0.12, n_sess)),
              fwd_len=rng.integers(80, 700, n_sess), rev_len=rng.integers(300, 1500, n_sess), label=0)

    # Name lookups ahead of most sessions.
    dns = rng.random(n_sess) < 0.7
    nd = int(dns.sum())
    conns.add(client=who[dns], server=resolver, cport=_ports(rng, nd), sport=53, kind=K_UDP,
              start=np.maximum(0.0, start[dns] - rng.uniform(0.01, 0.06, nd)), n_fwd=1, n_rev=1,
              gap=rng.uniform(0.002, 0.02, nd), fwd_len=rng.integers(60, 90, nd),
              rev_len=rng.integers(90, 300, nd), label=0)

    # A few short flash crowds on popular servers.
    for _ in range(int(rng.integers(1, 4))):
        n = int(rng.integers(20, 60))
        t0 = rng.uniform(1.0, duration - 5.0)
        conns.add(client=clients[rng.integers(0, n_clients, n)], server=servers[int(rng.integers(0, 3))],
                  cport=_ports(rng, n), sport=443, kind=K_TCP, start=t0 + rng.uniform(0, 2.0, n),
                  n_fwd=rng.integers(3, 9, n), n_rev=rng.integers(3, 9, n), gap=rng.uniform(0.02, 0.1, n),
                  fwd_len=rng.integers(80, 700, n), rev_len=rng.integers(300, 1500, n), label=0)

    # Occasional pings.
    n = int(rng.integers(5, 15))
    conns.add(client=clients[rng.integers(0, n_clients, n)], server=servers[rng.integers(0, n_servers, n)],
              cport=0, sport=0, kind=K_ICMP, start=rng.uniform(0.5, duration - 5, n), n_fwd=rng.integers(1, 5, n),
              gap=1.0, fwd_len=84, rev_len=84, label=0, n_rev=0)
    return servers


def _attack_start(rng: np.random.Generator, duration: float) -> float:
    lo, hi = 0.25 * duration, 0.75 * duration
    return float(rng.uniform(lo, hi))


def _ssh_crack(conns: _Conns, addrs: _Addrs, rng: np.random.Generator, duration: float) -> tuple[int, float, float]:
    attacker = addrs.code("203.0.113.7")
    victim = addrs.code("198.51.100.22")
    n = int(rng.integers(450, 551))
    t0 = _attack_start(rng, duration)
    span = float(rng.uniform(5.0, 7.0))
    conns.add(client=attacker, server=victim, cport=_sequential_ports(rng, n), sport=22, kind=K_TCP,
              start=np.sort(t0 + rng.uniform(0, span, n)), n_fwd=rng.integers(10, 15, n),
              n_rev=rng.integers(10, 15, n), gap=rng.uniform(0.003, 0.01, n),
              fwd_len=rng.integers(90, 130, n), rev_len=rng.integers(90, 160, n), label=1)
    return attacker, t0, span


def _brute_scan(conns: _Conns, addrs: _Addrs, rng: np.random.Generator, duration: float) -> None:
    scanner = addrs.code("203.0.113.99")
    n = int(rng.integers(1800, 2201))
    targets = addrs.from_ints(_block("100.64.0.0", rng, n))
    t0 = _attack_start(rng, duration)
    resp = rng.choice([SYN | ACK, RST | ACK, 0], size=n, p=[0.3, 0.6, 0.1])
    conns.add(client=scanner, server=targets, cport=_sequential_ports(rng, n), sport=int(rng.choice([22, 23, 445])),
              kind=K_PROBE, start=t0 + np.sort(rng.uniform(0, float(rng.uniform(3.0, 5.0)), n)), n_fwd=1,
              n_rev=(resp != 0).astype(int), gap=rng.uniform(0.001, 0.05, n), fwd_len=44, rev_len=44,
              resp_flags=resp, label=1)


def _spoof_flood(conns: _Conns, addrs: _Addrs, rng: np.random.Generator, duration: float) -> None:
    victim = addrs.code("198.51.100.80")
    n = int(rng.integers(2700, 3301))
    spoofed = addrs.from_ints(_block("45.0.0.0", rng, n, 1 << 24))
    t0 = _attack_start(rng, duration)
    conns.add(client=spoofed, server=victim, cport=_ports(rng, n), sport=80, kind=K_PROBE,
              start=t0 + rng.uniform(0, float(rng.uniform(2.5, 3.5)), n), n_fwd=1, n_rev=1,
              gap=rng.uniform(0.0005, 0.005, n), fwd_len=40, rev_len=44, resp_flags=SYN | ACK, label=1)
    # The victim also serves ordinary web clients.
    m = int(rng.integers(30, 60))
    clients = addrs.from_ints(_block("10.9.0.0", rng, m))
    conns.add(client=clients, server=victim, cport=_ports(rng, m), sport=80, kind=K_TCP,
              start=rng.uniform(0.5, duration - 2, m), n_fwd=rng.integers(3, 9, m), n_rev=rng.integers(3, 9, m),
              gap=rng.uniform(0.02, 0.1, m), fwd_len=rng.integers(80, 600, m), rev_len=rng.integers(300, 1500, m),
              label=0)


def _lowrate_probe(conns: _Conns, addrs: _Addrs, rng: np.random.Generator, duration: float) -> None:
    """Slow single-port application probing: each scanner sends SYNs at 244-400 pps."""
    n_scan = 6
    scanners = addrs.from_ints(_block("198.18.0.0", rng, n_scan))
    t0 = _attack_start(rng, duration)
    for sc in scanners:
        n = int(rng.integers(1000, 1501))
        rate = float(rng.uniform(244.0, 400.0))
        targets = addrs.from_ints(_block("100.72.0.0", rng, n))
        resp = rng.choice([SYN | ACK, RST | ACK, 0], size=n, p=[0.2, 0.7, 0.1])
        conns.add(client=int(sc), server=targets, cport=_sequential_ports(rng, n),
                  sport=int(rng.choice([22, 23, 25, 53, 80, 161, 3389])), kind=K_PROBE,
                  start=t0 + np.sort(rng.uniform(0, n / rate, n)), n_fwd=1, n_rev=(resp != 0).astype(int),
                  gap=rng.uniform(0.001, 0.05, n), fwd_len=44, rev_len=44, resp_flags=resp, label=1)


def _botnet_c2(conns: _Conns, addrs: _Addrs, rng: np.random.Generator, duration: float) -> None:
    bots = addrs.from_ints(_block("10.2.0.0", rng, 40))
    c2 = addrs.code("198.51.100.66")
    t0 = _attack_start(rng, duration)
    per = 5
    n = bots.shape[0] * per
    conns.add(client=np.repeat(bots, per), server=c2, cport=_ports(rng, n), sport=443, kind=K_TCP,
              start=t0 + rng.uniform(0, 4.0, n), n_fwd=rng.integers(4, 7, n), n_rev=rng.integers(4, 7, n),
              gap=rng.uniform(0.01, 0.05, n), fwd_len=rng.integers(150, 260, n), rev_len=rng.integers(100, 200, n),
              label=1)


def _obfuscation(conns: _Conns, rng: np.random.Generator, servers: np.ndarray, attacker: int, t0: float,
                 span: float) -> None:
    """Benign-looking TLS, UDP video and ICMP traffic sent by the attacker during the attack."""
    n = int(rng.integers(30, 50))
    conns.add(client=attacker, server=servers[rng.integers(0, servers.shape[0], n)], cport=_ports(rng, n), sport=443,
              kind=K_TCP, start=t0 + rng.uniform(0, span, n), n_fwd=rng.integers(4, 9, n), n_rev=rng.integers(4, 9, n),
              gap=rng.uniform(0.02, 0.1, n), fwd_len=rng.integers(80, 700, n), rev_len=rng.integers(300, 1500, n),
              label=0)
    m = 3
    conns.add(client=attacker, server=servers[rng.integers(0, servers.shape[0], m)], cport=_ports(rng, m),
              sport=int(rng.integers(30000, 40000)), kind=K_UDP, start=t0 + rng.uniform(0, span / 2, m),
              n_fwd=rng.integers(60, 150, m), n_rev=rng.integers(2, 6, m), gap=rng.uniform(0.01, 0.03, m),
              fwd_len=rng.integers(900, 1400, m), rev_len=60, label=0)
    k = 5
    conns.add(client=attacker, server=servers[rng.integers(0, servers.shape[0], k)], cport=0, sport=0, kind=K_ICMP,
              start=t0 + rng.uniform(0, span, k), n_fwd=rng.integers(2, 6, k), n_rev=0, gap=0.5, fwd_len=84,
              rev_len=84, label=0)


def _expand(t: dict[str, np.ndarray], rng: np.random.Generator, addrs: _Addrs) -> tuple[PacketBatch, np.ndarray]:
    """Expand connections to time-ordered packets; also returns each packet's connection index."""
    n_fwd, n_rev = t["n_fwd"].astype(np.int64), t["n_rev"].astype(np.int64)
    n = n_fwd + n_rev
    C = n.shape[0]
    total = int(n.sum())
    conn = np.repeat(np.arange(C), n)
    offsets = np.concatenate([[0], np.cumsum(n)[:-1]])
    k = np.arange(total) - offsets[conn]
    m = np.minimum(n_fwd, n_rev)[conn]
    paired = k < 2 * m
    rev = np.where(paired, k % 2 == 1, (n_rev > n_fwd)[conn])
    j = np.where(paired, k // 2, m + (k - 2 * m))
    n_dir = np.where(rev, n_rev[conn], n_fwd[conn])

    gaps = rng.exponential(1.0, total) * t["gap"][conn]
    gaps[k == 0] = 0.0
    cs = np.cumsum(gaps)
    ts = t["start"][conn] + (cs - cs[offsets][conn])

    kind = t["kind"][conn]
    flags = np.zeros(total, dtype=np.int32)
    tcp = kind == K_TCP
    first, last = j == 0, (j == n_dir - 1) & (j > 0)
    flags[tcp] = np.where(first[tcp], np.where(rev[tcp], SYN | ACK, SYN),
                          np.where(last[tcp], FIN | ACK, PSH | ACK))
    probe = kind == K_PROBE
    flags[probe] = np.where(rev[probe], t["resp_flags"][conn][probe], SYN)

    base_len = np.where(rev, t["rev_len"][conn], t["fwd_len"][conn]).astype(np.float64)
    data = tcp & ~first & ~last
    jitter = np.where(data | (kind == K_UDP), rng.normal(0, 0.08, total), 0.0)
    length = np.where(tcp & ~data, np.where(first, 60, 52), np.round(base_len * (1 + jitter)))
    length = np.clip(length, 28, 1500).astype(np.int32)

    proto = np.select([tcp | probe, kind == K_UDP], [L4.TCP, L4.UDP], L4.ICMP).astype(np.int8)
    client, server = t["client"][conn], t["server"][conn]
    cport, sport = t["cport"][conn], t["sport"][conn]
    src = np.where(rev, server, client).astype(np.int32)
    dst = np.where(rev, client, server).astype(np.int32)
    sp = np.where(rev, sport, cport).astype(np.int32)
    dp = np.where(rev, cport, sport).astype(np.int32)

    # Microsecond timestamps so CSV and PCAP carry identical values.
    us = np.round((EPOCH + ts) * 1e6).astype(np.int64)
    ts_q = (us // 1_000_000).astype(np.float64) + (us % 1_000_000) / 1e6
    order = np.argsort(us, kind="stable")
    batch = PacketBatch(ts_q[order], src[order], dst[order], sp[order], dp[order], proto[order], flags[order],
                        length[order], addrs=addrs.names)
    return batch, conn[order]


@dataclass
class Trace:
    scenario: str
    seed: int
    batch: PacketBatch
    labels: dict[FlowKey, str]

    def __iter__(self) -> Iterator[PacketRecord]:
        return self.batch.records()

    def __len__(self) -> int:
        return len(self.batch)

    def label_of(self, key: FlowKey) -> str:
        return self.labels.get(key, BENIGN)

    def write(self, trace_path: str | Path, sidecar_path: Optional[str | Path] = None) -> None:
        write_csv(self.batch.records(), trace_path)
        if sidecar_path is not None:
            write_sidecar(self.labels, sidecar_path)


def write_sidecar(labels: dict[FlowKey, str], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["src", "dst", "sport", "dport", "label"])
        for k in sorted(labels, key=lambda k: (k.src_addr, k.dst_addr, k.src_port, k.dst_port)):
            w.writerow([k.src_addr, k.dst_addr, k.src_port, k.dst_port, labels[k]])


def read_sidecar(path: str | Path) -> dict[FlowKey, str]:
    out: dict[FlowKey, str] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out[FlowKey(row["src"], row["dst"], int(row["sport"]), int(row["dport"]))] = row["label"]
    return out


def gen_synthetic(scenario: str, seed: int, scale: float = 1.0, duration: float = TRACE_SECONDS) -> Trace:
    """Trace for ``scenario``: benign web background plus the scenario's attack.

    The result is a pure function of the arguments.  ``scale`` multiplies the
    benign population (for throughput runs) and ``duration`` stretches the
    trace; attack shapes do not change.
    """
    if scenario not in SCENARIOS:
        raise UnknownScenario(f"unknown scenario {scenario!r}; choose from {', '.join(SCENARIOS)}")
    if duration < 10:
        raise ValueError("duration must be at least 10 s")
    rng = np.random.default_rng([int(seed), zlib.crc32(scenario.encode())])
    addrs = _Addrs()
    conns = _Conns()
    servers = _benign_web(conns, addrs, rng, scale, duration)
    if scenario == "ssh-crack":
        _ssh_crack(conns, addrs, rng, duration)
    elif scenario == "obfuscated-crack":
        attacker, t0, span = _ssh_crack(conns, addrs, rng, duration)
        _obfuscation(conns, rng, servers, attacker, t0, span)
    elif scenario == "brute-scan":
        _brute_scan(conns, addrs, rng, duration)
    elif scenario == "spoof-flood":
        _spoof_flood(conns, addrs, rng, duration)
    elif scenario == "lowrate-probe":
        _lowrate_probe(conns, addrs, rng, duration)
    elif scenario == "botnet-c2":
        _botnet_c2(conns, addrs, rng, duration)
    t = conns.table()
    batch, _ = _expand(t, rng, addrs)

    labels: dict[FlowKey, str] = {}
    names = addrs.names
    for c, s, cp, sp, nf, nr, lab in zip(t["client"].tolist(), t["server"].tolist(), t["cport"].tolist(),
                                         t["sport"].tolist(), t["n_fwd"].tolist(), t["n_rev"].tolist(),
                                         t["label"].tolist()):
        tag = ATTACK if lab else BENIGN
        keys = []
        if nf:
            keys.append(FlowKey(names[c], names[s], cp, sp))
        if nr:
            keys.append(FlowKey(names[s], names[c], sp, cp))
        for key in keys:
            if labels.get(key) != ATTACK:
                labels[key] = tag
    return Trace(scenario, int(seed), batch, labels)
