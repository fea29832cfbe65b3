"""Packet trace ingestion: CSV and PCAP readers, per-packet featurization, columnar batches."""

from __future__ import annotations

import csv
import ipaddress
import logging
import math
import socket
import struct
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import Iterable, Iterator, NamedTuple, Optional, Sequence

import numpy as np

log = logging.getLogger(__name__)

CSV_HEADER = ["ts", "src", "dst", "sport", "dport", "proto", "flags", "len"]


class L4(IntEnum):
    TCP = 0
    UDP = 1
    ICMP = 2
    OTHER = 3


# TCP header flag bits, in wire order.
FIN, SYN, RST, PSH, ACK, URG, ECE, CWR = (1 << i for i in range(8))

_PROTO_BY_NAME = {"TCP": L4.TCP, "UDP": L4.UDP, "ICMP": L4.ICMP, "OTHER": L4.OTHER}
_IPPROTO_TO_L4 = {6: L4.TCP, 17: L4.UDP, 1: L4.ICMP, 58: L4.ICMP}


class TraceFormatError(ValueError):
    """A trace file could not be parsed."""


class PacketRecord(NamedTuple):
    timestamp: float
    src_addr: str
    dst_addr: str
    src_port: int
    dst_port: int
    l4_protocol: L4
    tcp_flags: int
    length: int

    def validate(self) -> None:
        if not (math.isfinite(self.timestamp) and self.timestamp >= 0):
            raise ValueError(f"timestamp must be finite and non-negative, got {self.timestamp!r}")
        if self.length < 1:
            raise ValueError(f"length must be >= 1, got {self.length}")
        if not (0 <= self.src_port <= 0xFFFF and 0 <= self.dst_port <= 0xFFFF):
            raise ValueError("ports must be in 0..65535")
        if not 0 <= self.tcp_flags <= 0xFF:
            raise ValueError(f"tcp_flags must fit in 8 bits, got {self.tcp_flags}")
        if self.tcp_flags and self.l4_protocol != L4.TCP:
            raise ValueError("tcp_flags must be 0 for non-TCP packets")


class PerPacketFeature(NamedTuple):
    protocol_mask: int
    length: int
    interval: float


def protocol_mask(proto: int, tcp_flags: int = 0) -> int:
    """16-bit mask: one-hot protocol in bits 0-3, TCP flags in bits 8-15."""
    mask = 1 << int(proto)
    if proto == L4.TCP:
        mask |= (int(tcp_flags) & 0xFF) << 8
    return mask


def protocol_masks(proto: np.ndarray, flags: np.ndarray) -> np.ndarray:
    proto = proto.astype(np.uint16)
    mask = np.left_shift(np.uint16(1), proto)
    tcp = proto == L4.TCP
    return (mask | np.where(tcp, flags.astype(np.uint16) << 8, 0)).astype(np.uint16)


def featurize(pkt: PacketRecord, prev_ts_same_flow: Optional[float] = None) -> PerPacketFeature:
    interval = 0.0 if prev_ts_same_flow is None else max(0.0, pkt.timestamp - prev_ts_same_flow)
    return PerPacketFeature(protocol_mask(pkt.l4_protocol, pkt.tcp_flags), pkt.length, interval)


def canonical_addr(text: str) -> str:
    return str(ipaddress.ip_address(text.strip()))


# --------------------------------------------------------------------------- CSV


def _parse_flags(text: str) -> int:
    return int(text.strip(), 0)


def _parse_proto(text: str, lineno: int) -> L4:
    name = text.strip().upper()
    proto = _PROTO_BY_NAME.get(name)
    if proto is None:
        log.warning("line %d: unknown protocol %r mapped to OTHER", lineno, text)
        return L4.OTHER
    return proto


def _parse_row(row: Sequence[str], lineno: int) -> PacketRecord:
    if len(row) != len(CSV_HEADER):
        raise TraceFormatError(f"line {lineno}: expected {len(CSV_HEADER)} fields, got {len(row)}")
    try:
        rec = PacketRecord(
            timestamp=float(row[0]),
            src_addr=canonical_addr(row[1]),
            dst_addr=canonical_addr(row[2]),
            src_port=int(row[3]),
            dst_port=int(row[4]),
            l4_protocol=_parse_proto(row[5], lineno),
            tcp_flags=_parse_flags(row[6]),
            length=int(row[7]),
        )
        rec.validate()
    except ValueError as exc:
        raise TraceFormatError(f"line {lineno}: {exc}") from None
    return rec


def read_csv(path: str | Path) -> Iterator[PacketRecord]:
    """Yield packets from a ``ts,src,dst,sport,dport,proto,flags,len`` file in row order."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != CSV_HEADER:
            raise TraceFormatError(f"{path}: missing or wrong header, expected {','.join(CSV_HEADER)}")
        for row in reader:
            if not row:
                continue
            yield _parse_row(row, reader.line_num)


def write_csv(records: Iterable[PacketRecord], path: str | Path) -> int:
    n = 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in records:
            w.writerow([repr(float(r.timestamp)), r.src_addr, r.dst_addr, r.src_port, r.dst_port,
                        L4(r.l4_protocol).name, f"0x{r.tcp_flags:02x}", r.length])
            n += 1
    return n


# --------------------------------------------------------------------------- PCAP

_LINK_ETHERNET = 1
_LINK_RAW = {12, 14, 101}
_LINK_SLL = 113
_LINK_NULL = 0
_ETH_IPV4, _ETH_IPV6 = 0x0800, 0x86DD
_VLAN_TYPES = {0x8100, 0x88A8, 0x9100}


class _Truncated(Exception):
    pass


def _l3_offset(link: int, buf: bytes) -> tuple[int, int] | None:
    """Return (ethertype-ish version hint, offset) of the IP header, or None if not IP."""
    if link == _LINK_ETHERNET:
        if len(buf) < 14:
            raise _Truncated
        etype = struct.unpack_from("!H", buf, 12)[0]
        off = 14
        while etype in _VLAN_TYPES:
            if len(buf) < off + 4:
                raise _Truncated
            etype = struct.unpack_from("!H", buf, off + 2)[0]
            off += 4
        if etype == _ETH_IPV4:
            return 4, off
        if etype == _ETH_IPV6:
            return 6, off
        return None
    if link in _LINK_RAW:
        if not buf:
            raise _Truncated
        ver = buf[0] >> 4
        return (ver, 0) if ver in (4, 6) else None
    if link == _LINK_SLL:
        if len(buf) < 16:
            raise _Truncated
        etype = struct.unpack_from("!H", buf, 14)[0]
        if etype == _ETH_IPV4:
            return 4, 16
        if etype == _ETH_IPV6:
            return 6, 16
        return None
    if link == _LINK_NULL:
        if len(buf) < 4:
            raise _Truncated
        family = struct.unpack_from("=I", buf, 0)[0]
        if family == socket.AF_INET:
            return 4, 4
        if family in (10, 24, 28, 30):  # AF_INET6 varies by platform
            return 6, 4
        return None
    raise TraceFormatError(f"unsupported link type {link}")


def _decode_ip(ts: float, buf: bytes, ver: int, off: int) -> PacketRecord:
    if ver == 4:
        if len(buf) < off + 20:
            raise _Truncated
        vihl, _, total_len = struct.unpack_from("!BBH", buf, off)
        ihl = (vihl & 0x0F) * 4
        ipproto = buf[off + 9]
        src = socket.inet_ntop(socket.AF_INET, buf[off + 12:off + 16])
        dst = socket.inet_ntop(socket.AF_INET, buf[off + 16:off + 20])
        l4 = off + ihl
        length = total_len
    else:
        if len(buf) < off + 40:
            raise _Truncated
        payload_len = struct.unpack_from("!H", buf, off + 4)[0]
        ipproto = buf[off + 6]
        src = socket.inet_ntop(socket.AF_INET6, buf[off + 8:off + 24])
        dst = socket.inet_ntop(socket.AF_INET6, buf[off + 24:off + 40])
        l4 = off + 40
        length = payload_len + 40
    proto = _IPPROTO_TO_L4.get(ipproto, L4.OTHER)
    sport = dport = flags = 0
    if proto in (L4.TCP, L4.UDP):
        need = 14 if proto == L4.TCP else 4
        if len(buf) < l4 + need:
            raise _Truncated
        sport, dport = struct.unpack_from("!HH", buf, l4)
        if proto == L4.TCP:
            flags = buf[l4 + 13]
    return PacketRecord(ts, canonical_addr(src), canonical_addr(dst), sport, dport, proto, flags, max(length, 1))


class PcapStream:
    """Iterate IP packets of a classic PCAP or pcapng file.

    ``skipped`` counts non-IP frames, ``truncated`` counts frames whose headers
    were cut short; both are final once iteration finishes.
    """

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self.skipped = 0
        self.truncated = 0
        try:
            with open(self.path, "rb") as fh:
                self._magic = fh.read(4)
        except OSError as exc:
            raise TraceFormatError(f"{path}: cannot read capture: {exc}") from exc

    def __iter__(self) -> Iterator[PacketRecord]:
        import dpkt

        with open(self.path, "rb") as fh:
            try:
                if self._magic == b"\x0a\x0d\x0d\x0a":
                    reader = dpkt.pcapng.Reader(fh)
                elif self._magic == b"":
                    return
                else:
                    reader = dpkt.pcap.Reader(fh)
            except (ValueError, dpkt.dpkt.UnpackError, dpkt.dpkt.NeedData) as exc:
                raise TraceFormatError(f"{self.path}: not a PCAP capture ({exc})") from exc
            link = reader.datalink()
            for ts, buf in reader:
                try:
                    hint = _l3_offset(link, buf)
                    if hint is None:
                        self.skipped += 1
                        continue
                    yield _decode_ip(float(ts), buf, *hint)
                except _Truncated:
                    self.truncated += 1
                    log.warning("%s: truncated frame at ts=%s skipped", self.path, ts)


def read_pcap(path: str | Path) -> PcapStream:
    return PcapStream(path)


def _ip_bytes(addr: str) -> tuple[int, bytes]:
    ip = ipaddress.ip_address(addr)
    return ip.version, ip.packed


def write_pcap(records: Iterable[PacketRecord], path: str | Path) -> int:
    """Write Ethernet/IP frames whose IP total length equals each record's ``length``.

    Timestamps are stored at microsecond resolution.
    """
    import dpkt

    n = 0
    with open(path, "wb") as fh:
        w = dpkt.pcap.Writer(fh, linktype=dpkt.pcap.DLT_EN10MB)
        for r in records:
            ver, src = _ip_bytes(r.src_addr)
            ver2, dst = _ip_bytes(r.dst_addr)
            if ver != ver2:
                raise ValueError("mixed IPv4/IPv6 endpoints")
            proto = L4(r.l4_protocol)
            if proto in (L4.ICMP, L4.OTHER) and (r.src_port or r.dst_port):
                raise ValueError("portless protocols must use port 0")
            if proto == L4.TCP:
                l4 = struct.pack("!HHIIBBHHH", r.src_port, r.dst_port, 0, 0, 5 << 4, r.tcp_flags, 65535, 0, 0)
                ipproto = 6
            elif proto == L4.UDP:
                l4 = struct.pack("!HHHH", r.src_port, r.dst_port, 0, 0)
                ipproto = 17
            elif proto == L4.ICMP:
                l4 = struct.pack("!BBHI", 8, 0, 0, 0)
                ipproto = 1 if ver == 4 else 58
            else:
                l4 = b""
                ipproto = 47
            hdr = 20 if ver == 4 else 40
            pad = r.length - hdr - len(l4)
            if pad < 0:
                raise ValueError(f"length {r.length} too small for {proto.name} headers")
            payload = l4 + bytes(pad)
            if ver == 4:
                ip = struct.pack("!BBHHHBBH4s4s", 0x45, 0, r.length, 0, 0, 64, ipproto, 0, src, dst)
                etype = _ETH_IPV4
            else:
                ip = struct.pack("!IHBB16s16s", 6 << 28, len(payload), ipproto, 64, src, dst)
                etype = _ETH_IPV6
            frame = b"\x02\x00\x00\x00\x00\x02" + b"\x02\x00\x00\x00\x00\x01" + struct.pack("!H", etype) + ip + payload
            sec = int(math.floor(r.timestamp))
            usec = int(round((r.timestamp - sec) * 1e6))
            if usec >= 1_000_000:
                sec, usec = sec + 1, usec - 1_000_000
            w.writepkt(frame, ts=sec + usec / 1e6)
            n += 1
    return n


# --------------------------------------------------------------------------- columnar batches


@dataclass
class PacketBatch:
    """Columnar packets. ``src``/``dst`` index into ``addrs``."""

    ts: np.ndarray
    src: np.ndarray
    dst: np.ndarray
    sport: np.ndarray
    dport: np.ndarray
    proto: np.ndarray
    flags: np.ndarray
    length: np.ndarray
    addrs: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return int(self.ts.shape[0])

    @classmethod
    def empty(cls) -> PacketBatch:
        return cls(np.zeros(0), *(np.zeros(0, dtype=np.int32) for _ in range(7)), addrs=[])

    @classmethod
    def from_records(cls, records: Iterable[PacketRecord]) -> PacketBatch:
        index: dict[str, int] = {}
        cols: list[list] = [[] for _ in range(8)]
        for r in records:
            s = index.setdefault(r.src_addr, len(index))
            d = index.setdefault(r.dst_addr, len(index))
            for col, v in zip(cols, (r.timestamp, s, d, r.src_port, r.dst_port, int(r.l4_protocol), r.tcp_flags, r.length)):
                col.append(v)
        return cls(
            np.asarray(cols[0], dtype=np.float64),
            np.asarray(cols[1], dtype=np.int32),
            np.asarray(cols[2], dtype=np.int32),
            np.asarray(cols[3], dtype=np.int32),
            np.asarray(cols[4], dtype=np.int32),
            np.asarray(cols[5], dtype=np.int8),
            np.asarray(cols[6], dtype=np.int32),
            np.asarray(cols[7], dtype=np.int32),
            addrs=list(index),
        )

    def records(self) -> Iterator[PacketRecord]:
        addrs = self.addrs
        protos = list(L4)
        cols = (self.ts.tolist(), self.src.tolist(), self.dst.tolist(), self.sport.tolist(),
                self.dport.tolist(), self.proto.tolist(), self.flags.tolist(), self.length.tolist())
        for t, s, d, sp, dp, pr, fl, ln in zip(*cols):
            yield PacketRecord(t, addrs[s], addrs[d], sp, dp, protos[pr], fl, ln)

    def __getitem__(self, idx) -> PacketBatch:
        return PacketBatch(self.ts[idx], self.src[idx], self.dst[idx], self.sport[idx], self.dport[idx],
                           self.proto[idx], self.flags[idx], self.length[idx], addrs=self.addrs)

    def masks(self) -> np.ndarray:
        return protocol_masks(self.proto, self.flags)

    def chunks(self, size: int) -> Iterator[PacketBatch]:
        for lo in range(0, len(self), size):
            yield self[lo:lo + size]


def load_csv(path: str | Path) -> PacketBatch:
    """Read a CSV trace into a batch; falls back to the row parser to report bad rows."""
    import pandas as pd

    path = Path(path)
    with open(path, newline="") as fh:
        first = fh.readline()
    if [h.strip() for h in first.strip().split(",")] != CSV_HEADER:
        raise TraceFormatError(f"{path}: missing or wrong header, expected {','.join(CSV_HEADER)}")
    try:
        df = pd.read_csv(
            path,
            dtype={"src": str, "dst": str, "proto": str, "flags": str, "ts": np.float64,
                   "sport": np.int64, "dport": np.int64, "len": np.int64},
            float_precision="round_trip",
            skip_blank_lines=True,
        )
        batch = _frame_to_batch(df)
    except (ValueError, TypeError, pd.errors.ParserError):
        return PacketBatch.from_records(read_csv(path))
    return batch


def _frame_to_batch(df) -> PacketBatch:
    import pandas as pd

    if len(df) == 0:
        return PacketBatch.empty()
    codes, uniques = pd.factorize(pd.concat([df["src"], df["dst"]], ignore_index=True), sort=False)
    canon = [canonical_addr(u) for u in uniques]
    # Distinct spellings of one address collapse onto one code.
    remap: dict[str, int] = {}
    code_map = np.asarray([remap.setdefault(c, len(remap)) for c in canon], dtype=np.int32)
    codes = code_map[codes]
    n = len(df)
    pcodes, puniq = pd.factorize(df["proto"].str.strip().str.upper())
    if (pcodes < 0).any():
        raise ValueError("missing proto")
    ptable = np.asarray([_PROTO_BY_NAME.get(u, L4.OTHER) for u in puniq], dtype=np.int8)
    for u in puniq:
        if u not in _PROTO_BY_NAME:
            log.warning("unknown protocol %r mapped to OTHER", u)
    fcodes, funiq = pd.factorize(df["flags"])
    if (fcodes < 0).any():
        raise ValueError("missing flags")
    ftable = np.asarray([_parse_flags(u) for u in funiq], dtype=np.int64)
    batch = PacketBatch(
        df["ts"].to_numpy(np.float64),
        codes[:n].astype(np.int32),
        codes[n:].astype(np.int32),
        df["sport"].to_numpy(np.int64).astype(np.int32),
        df["dport"].to_numpy(np.int64).astype(np.int32),
        ptable[pcodes],
        ftable[fcodes].astype(np.int32),
        df["len"].to_numpy(np.int64).astype(np.int32),
        addrs=list(remap),
    )
    ok = (
        np.isfinite(batch.ts).all() and (batch.ts >= 0).all() and (batch.length >= 1).all()
        and ((batch.sport >= 0) & (batch.sport <= 0xFFFF)).all()
        and ((batch.dport >= 0) & (batch.dport <= 0xFFFF)).all()
        and ((batch.flags >= 0) & (batch.flags <= 0xFF)).all()
        and not ((batch.flags != 0) & (batch.proto != L4.TCP)).any()
    )
    if not ok:
        raise ValueError("invalid field values")
    return batch


def load_trace(path: str | Path, fmt: str | None = None) -> PacketBatch:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"{path}: no such file")
    fmt = fmt or ("pcap" if path.suffix.lower() in (".pcap", ".pcapng", ".cap") else "csv")
    if fmt == "csv":
        return load_csv(path)
    if fmt == "pcap":
        return PacketBatch.from_records(read_pcap(path))
    raise ValueError(f"unknown trace format {fmt!r}")
