#!/usr/bin/env python3
"""
Capture Ingest
------------------------------------------
Turns classic pcap files into bidirectional TCP sessions, one per
canonical 5-tuple per file (SplitCap style), and groups them by the
MAC address of the host that opened each session.

It:
  • Parses pcap global/record headers in either byte order (dpkt header types)
  • Decodes Ethernet/IPv4/TCP with dpkt; UDP, IPv6 and non-IP frames are counted and dropped
  • Buckets packets by canonical 5-tuple, keeping capture order inside each session
  • Maps initiator MACs to device labels (optionally collapsing unknown MACs into non-IoT)
  • Writes pcaps back out (test fixtures, per-session SplitCap parity output)

No TCP reassembly, retransmission dedup, or session timeout is applied:
every packet sharing a key inside one file belongs to the same session.
"""

from __future__ import annotations
import ipaddress
import json
import re
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO, Iterable, Mapping, NamedTuple, Sequence

import dpkt
from tqdm import tqdm

from iotprint.config import Config
from iotprint.errors import ConfigError, FormatError, TruncatedRecordError, UnsupportedFormatError


logger = Config.setup_logger(__name__)

PCAPNG_MAGIC: int = 0x0A0D0D0A
PROTO_TCP: int = dpkt.ip.IP_PROTO_TCP
PROTO_UDP: int = dpkt.ip.IP_PROTO_UDP

_MAC_RE = re.compile(r"^[0-9a-f]{2}([:-][0-9a-f]{2}){5}$")


# -------------------- DOMAIN TYPES --------------------

@dataclass(frozen=True)
class RawPacket:
    """One pcap record in file order."""
    ts_sec: int
    ts_usec: int
    link_bytes: bytes
    capture_order: int

    @property
    def timestamp(self) -> float:
        return self.ts_sec + self.ts_usec / 1_000_000


Endpoint = tuple[str, int]


def _endpoint_order(endpoint: Endpoint) -> tuple[int, int]:
    return int(ipaddress.IPv4Address(endpoint[0])), endpoint[1]


@dataclass(frozen=True, order=True)
class SessionKey:
    """Canonical 5-tuple: endpoint_lo sorts before endpoint_hi as (ip, port)."""
    endpoint_lo: Endpoint
    endpoint_hi: Endpoint
    protocol: int = PROTO_TCP

    def __post_init__(self) -> None:
        if _endpoint_order(self.endpoint_lo) > _endpoint_order(self.endpoint_hi):
            raise ValueError(f"SessionKey endpoints out of order: {self.endpoint_lo} > {self.endpoint_hi}")

    @classmethod
    def canonical(cls, src: Endpoint, dst: Endpoint, protocol: int = PROTO_TCP) -> SessionKey:
        lo, hi = sorted((src, dst), key=_endpoint_order)
        return cls(lo, hi, protocol)

    def __str__(self) -> str:
        (ip_a, port_a), (ip_b, port_b) = self.endpoint_lo, self.endpoint_hi
        return f"{ip_a}:{port_a}<->{ip_b}:{port_b}/{self.protocol}"


class SessionPacket(NamedTuple):
    from_initiator: bool
    payload: bytes
    capture_order: int


@dataclass(frozen=True)
class SessionRecord:
    key: SessionKey
    initiator_mac: bytes
    packets: tuple[SessionPacket, ...]
    file_id: str = ""

    @property
    def initiator_mac_str(self) -> str:
        return format_mac(self.initiator_mac)

    @property
    def payload_length(self) -> int:
        return sum(len(p.payload) for p in self.packets)


@dataclass
class SplitStats:
    """Counters for frames that did not end up in a TCP session."""
    tcp_packets: int = 0
    udp_packets: int = 0
    udp_flows: int = 0
    ipv6_frames: int = 0
    other_ip_frames: int = 0
    non_ip_frames: int = 0
    unparseable_frames: int = 0

    @property
    def discarded_frames(self) -> int:
        return (self.udp_packets + self.ipv6_frames + self.other_ip_frames
                + self.non_ip_frames + self.unparseable_frames)

    def merge(self, other: SplitStats) -> None:
        for name in self.__dataclass_fields__:
            setattr(self, name, getattr(self, name) + getattr(other, name))

    def to_dict(self) -> dict[str, int]:
        return {name: getattr(self, name) for name in self.__dataclass_fields__}


# -------------------- MAC HELPERS --------------------

def format_mac(mac: bytes) -> str:
    return ":".join(f"{b:02x}" for b in mac)


def parse_mac(text: str) -> bytes:
    value = text.strip().lower()
    if not _MAC_RE.match(value):
        raise ConfigError(f"Malformed MAC address: {text!r}")
    return bytes(int(part, 16) for part in re.split(r"[:-]", value))


def normalize_mac_map(entries: Mapping[str, str] | Iterable[tuple[str, str]]) -> dict[str, str]:
    """Validate MAC → label pairs and return them keyed by lowercase colon form."""
    pairs = entries.items() if isinstance(entries, Mapping) else entries
    normalized: dict[str, str] = {}
    for mac, label in pairs:
        key = format_mac(parse_mac(mac))
        if key in normalized:
            raise ConfigError(f"Duplicate MAC in mac map: {mac}")
        if not isinstance(label, str) or not label.strip():
            raise ConfigError(f"Empty label for MAC {mac}")
        normalized[key] = label
    return normalized


def load_mac_map(path: Path) -> dict[str, str]:
    """Read a JSON object of MAC → label, rejecting duplicate keys."""
    try:
        pairs = json.loads(Path(path).read_text(encoding="utf-8"), object_pairs_hook=list)
    except json.JSONDecodeError as e:
        raise ConfigError(f"MAC map {path} is not valid JSON: {e}") from e
    if not isinstance(pairs, list):
        raise ConfigError(f"MAC map {path} must be a JSON object")
    return normalize_mac_map(pairs)


# -------------------- PCAP PARSING --------------------

def parse_pcap(data: bytes, source: str = "<bytes>") -> list[RawPacket]:
    """Parse a classic pcap image into RawPackets, honoring the header byte order."""
    if len(data) < 4:
        raise FormatError(f"{source}: pcap too short for a global header ({len(data)} bytes)")

    magic = int.from_bytes(data[:4], "big")
    if magic == PCAPNG_MAGIC:
        raise UnsupportedFormatError(f"{source}: unsupported format: pcapng (convert to classic pcap first)")

    if magic in (dpkt.pcap.TCPDUMP_MAGIC, dpkt.pcap.TCPDUMP_MAGIC_NANO):
        file_hdr_cls, pkt_hdr_cls = dpkt.pcap.FileHdr, dpkt.pcap.PktHdr
    elif magic in (dpkt.pcap.PMUDPCT_MAGIC, dpkt.pcap.PMUDPCT_MAGIC_NANO):
        file_hdr_cls, pkt_hdr_cls = dpkt.pcap.LEFileHdr, dpkt.pcap.LEPktHdr
    else:
        raise FormatError(f"{source}: invalid pcap magic 0x{magic:08X}")

    if len(data) < file_hdr_cls.__hdr_len__:
        raise FormatError(f"{source}: truncated pcap global header ({len(data)} bytes)")
    file_hdr = file_hdr_cls(data[:file_hdr_cls.__hdr_len__])
    if file_hdr.linktype != dpkt.pcap.DLT_EN10MB:
        raise FormatError(f"{source}: unsupported link type {file_hdr.linktype} (only Ethernet is supported)")
    nano = file_hdr.magic in (dpkt.pcap.TCPDUMP_MAGIC_NANO, dpkt.pcap.PMUDPCT_MAGIC_NANO)

    packets: list[RawPacket] = []
    offset = file_hdr_cls.__hdr_len__
    hdr_len = pkt_hdr_cls.__hdr_len__
    index = 0
    while offset < len(data):
        if len(data) - offset < hdr_len:
            raise TruncatedRecordError(index, f"{source}: header needs {hdr_len} bytes, {len(data) - offset} left")
        pkt_hdr = pkt_hdr_cls(data[offset:offset + hdr_len])
        start = offset + hdr_len
        end = start + pkt_hdr.caplen
        if end > len(data):
            raise TruncatedRecordError(index, f"{source}: captured length {pkt_hdr.caplen} exceeds remaining {len(data) - start} bytes")
        usec = pkt_hdr.tv_usec // 1000 if nano else pkt_hdr.tv_usec
        packets.append(RawPacket(pkt_hdr.tv_sec, usec, data[start:end], index))
        offset = end
        index += 1
    return packets


def parse_pcap_file(path: Path) -> list[RawPacket]:
    path = Path(path)
    return parse_pcap(path.read_bytes(), source=str(path))


# -------------------- PCAP WRITING --------------------

def pcap_bytes(frames: Iterable[tuple[float, bytes]], big_endian: bool = False, snaplen: int = 65535) -> bytes:
    """Serialize (timestamp, frame) pairs as a classic microsecond pcap."""
    if big_endian:
        file_hdr_cls, pkt_hdr_cls = dpkt.pcap.FileHdr, dpkt.pcap.PktHdr
    else:
        file_hdr_cls, pkt_hdr_cls = dpkt.pcap.LEFileHdr, dpkt.pcap.LEPktHdr
    chunks = [bytes(file_hdr_cls(magic=dpkt.pcap.TCPDUMP_MAGIC, snaplen=snaplen, linktype=dpkt.pcap.DLT_EN10MB))]
    for ts, frame in frames:
        sec = int(ts)
        usec = int(round((ts - sec) * 1_000_000))
        if usec >= 1_000_000:
            sec, usec = sec + 1, usec - 1_000_000
        chunks.append(bytes(pkt_hdr_cls(tv_sec=sec, tv_usec=usec, caplen=len(frame), len=len(frame))))
        chunks.append(frame)
    return b"".join(chunks)


def write_pcap(packets: Sequence[RawPacket], out: Path | BinaryIO, big_endian: bool = False) -> None:
    """Write RawPackets back out as a classic pcap (exact timestamps preserved)."""
    data = pcap_bytes(((p.timestamp, p.link_bytes) for p in packets), big_endian=big_endian)
    if isinstance(out, (str, Path)):
        Path(out).write_bytes(data)
    else:
        out.write(data)


# -------------------- SESSION SPLITTING --------------------

class _Builder:
    __slots__ = ("key", "mac", "initiator", "packets")

    def __init__(self, key: SessionKey, mac: bytes, initiator: Endpoint) -> None:
        self.key = key
        self.mac = mac
        self.initiator = initiator
        self.packets: list[SessionPacket] = []


def split_sessions_with_stats(packets: Sequence[RawPacket], file_id: str = "") -> tuple[list[SessionRecord], SplitStats]:
    """Bucket TCP packets by canonical 5-tuple; count everything that is dropped."""
    stats = SplitStats()
    builders: dict[SessionKey, _Builder] = {}
    udp_keys: set[SessionKey] = set()

    for pkt in packets:
        try:
            eth = dpkt.ethernet.Ethernet(pkt.link_bytes)
        except (dpkt.NeedData, dpkt.UnpackError):
            stats.unparseable_frames += 1
            continue

        ip = eth.data
        if isinstance(ip, dpkt.ip6.IP6):
            stats.ipv6_frames += 1
            continue
        if not isinstance(ip, dpkt.ip.IP):
            if eth.type == dpkt.ethernet.ETH_TYPE_IP:
                stats.unparseable_frames += 1
            else:
                stats.non_ip_frames += 1
            continue

        transport = ip.data
        src_ip = str(ipaddress.IPv4Address(ip.src))
        dst_ip = str(ipaddress.IPv4Address(ip.dst))
        if isinstance(transport, dpkt.tcp.TCP):
            src, dst = (src_ip, transport.sport), (dst_ip, transport.dport)
            key = SessionKey.canonical(src, dst, PROTO_TCP)
            builder = builders.get(key)
            if builder is None:
                builder = builders[key] = _Builder(key, bytes(eth.src), src)
            builder.packets.append(SessionPacket(src == builder.initiator, bytes(transport.data), pkt.capture_order))
            stats.tcp_packets += 1
        elif isinstance(transport, dpkt.udp.UDP):
            udp_keys.add(SessionKey.canonical((src_ip, transport.sport), (dst_ip, transport.dport), PROTO_UDP))
            stats.udp_packets += 1
        elif ip.p in (PROTO_TCP, PROTO_UDP):
            stats.unparseable_frames += 1
        else:
            stats.other_ip_frames += 1

    stats.udp_flows = len(udp_keys)
    sessions = [
        SessionRecord(b.key, b.mac, tuple(b.packets), file_id)
        for b in builders.values()
    ]
    return sessions, stats


def split_sessions(packets: Sequence[RawPacket], file_id: str = "") -> list[SessionRecord]:
    """Split packets into bidirectional TCP sessions in order of first appearance."""
    sessions, stats = split_sessions_with_stats(packets, file_id)
    if stats.discarded_frames:
        logger.debug(
            "Split %s: %d sessions, dropped %d UDP packets (%d flows), %d IPv6, %d non-IP, %d unparseable",
            file_id or "<packets>", len(sessions), stats.udp_packets, stats.udp_flows,
            stats.ipv6_frames, stats.non_ip_frames, stats.unparseable_frames,
        )
    return sessions


def split_pcap_files(paths: Sequence[Path]) -> tuple[list[SessionRecord], SplitStats, dict[str, list[RawPacket]]]:
    """
    Parse and split each file independently (sessions never span files).
    Returns the sessions, merged stats, and the raw packets per file id.
    """
    all_sessions: list[SessionRecord] = []
    total = SplitStats()
    raw_by_file: dict[str, list[RawPacket]] = {}
    for path in tqdm(list(paths), desc="Splitting pcaps", unit="file", disable=not Config.TQDM_ENABLED):
        path = Path(path)
        file_id = path.name
        packets = parse_pcap_file(path)
        sessions, stats = split_sessions_with_stats(packets, file_id)
        logger.info("%s: %d packets → %d TCP sessions (%d UDP flows dropped)",
                    file_id, len(packets), len(sessions), stats.udp_flows)
        all_sessions.extend(sessions)
        total.merge(stats)
        raw_by_file[file_id] = packets
    return all_sessions, total, raw_by_file


# -------------------- MAC GROUPING --------------------

def group_by_mac(
    sessions: Sequence[SessionRecord],
    mac_map: Mapping[str, str] | Iterable[tuple[str, str]] | None = None,
    collapse_non_iot: bool = False,
    non_iot_label: str = Config.NON_IOT_LABEL,
    unmapped_label: str = Config.UNMAPPED_LABEL,
) -> dict[str, list[SessionRecord]]:
    """
    Group sessions under the label of their initiator MAC.

    Without a map each MAC is its own group (the per-MAC folder layout).
    With a map, unknown MACs go under `unmapped_label`, or under
    `non_iot_label` when `collapse_non_iot` is set.
    """
    normalized = normalize_mac_map(mac_map) if mac_map is not None else None
    fallback = non_iot_label if collapse_non_iot else unmapped_label

    groups: dict[str, list[SessionRecord]] = {}
    for session in sessions:
        mac = session.initiator_mac_str
        if normalized is None:
            label = mac
        else:
            label = normalized.get(mac, fallback)
        groups.setdefault(label, []).append(session)

    counts = Counter({label: len(items) for label, items in groups.items()})
    logger.debug("Grouped %d sessions into %d labels: %s", len(sessions), len(groups), dict(counts))
    return {label: groups[label] for label in sorted(groups)}
