"""
Shared fixtures: raw frame builders, synthetic pcaps and synthetic device traffic.

Frames are assembled byte by byte (Ethernet II / IPv4 / TCP or UDP, IPv6 and
ARP for the discard paths) so the parser under test never decodes something
it also encoded.
"""

from __future__ import annotations
import json
import socket
import struct
from pathlib import Path

import numpy as np
import pytest

from iotprint.capture_ingest import pcap_bytes
from iotprint.config import Config

DATA_DIR = Path(__file__).parent / "data"

SERVER_IP = "10.0.1.1"
SERVER_MAC = "02:00:00:00:00:fe"
SYNTHETIC_DEVICES = 5
SYNTHETIC_SESSIONS = 1200
BLOCK = 96
BLOCKS = 4

TH_FIN, TH_SYN, TH_ACK, TH_PSH = 0x01, 0x02, 0x10, 0x08


@pytest.fixture(autouse=True)
def _isolated_config(tmp_path, monkeypatch):
    """No progress bars; default data and log folders inside the test's tmp dir."""
    Config.set_tqdm(False)
    monkeypatch.setattr(Config, "DATA_DIR", tmp_path / "data")
    monkeypatch.setattr(Config, "LOG_DIR", tmp_path / "logs")
    yield


# -------------------- FRAME BUILDERS --------------------

def mac_bytes(text: str) -> bytes:
    return bytes(int(part, 16) for part in text.split(":"))


def ethernet(src_mac: str, dst_mac: str, ethertype: int, body: bytes) -> bytes:
    return mac_bytes(dst_mac) + mac_bytes(src_mac) + struct.pack(">H", ethertype) + body


def ipv4(src_ip: str, dst_ip: str, proto: int, body: bytes) -> bytes:
    header = struct.pack(
        ">BBHHHBBH4s4s",
        0x45, 0, 20 + len(body), 0, 0, 64, proto, 0,
        socket.inet_aton(src_ip), socket.inet_aton(dst_ip),
    )
    return header + body


def tcp_segment(sport: int, dport: int, payload: bytes = b"", flags: int = TH_ACK | TH_PSH, seq: int = 0) -> bytes:
    return struct.pack(">HHIIBBHHH", sport, dport, seq, 0, 5 << 4, flags, 65535, 0, 0) + payload


def udp_datagram(sport: int, dport: int, payload: bytes = b"") -> bytes:
    return struct.pack(">HHHH", sport, dport, 8 + len(payload), 0) + payload


def tcp_frame(src: tuple[str, int], dst: tuple[str, int], payload: bytes = b"",
              src_mac: str = "02:00:00:00:00:01", dst_mac: str = SERVER_MAC,
              flags: int = TH_ACK | TH_PSH) -> bytes:
    return ethernet(src_mac, dst_mac, 0x0800, ipv4(src[0], dst[0], 6, tcp_segment(src[1], dst[1], payload, flags)))


def udp_frame(src: tuple[str, int], dst: tuple[str, int], payload: bytes = b"",
              src_mac: str = "02:00:00:00:00:01", dst_mac: str = SERVER_MAC) -> bytes:
    return ethernet(src_mac, dst_mac, 0x0800, ipv4(src[0], dst[0], 17, udp_datagram(src[1], dst[1], payload)))


def ipv6_frame(src_mac: str = "02:00:00:00:00:01") -> bytes:
    header = struct.pack(">IHBB16s16s", 6 << 28, 8, 17, 64, b"\x00" * 15 + b"\x01", b"\x00" * 15 + b"\x02")
    return ethernet(src_mac, SERVER_MAC, 0x86DD, header + udp_datagram(5353, 5353))


def arp_frame(src_mac: str = "02:00:00:00:00:01") -> bytes:
    body = struct.pack(">HHBBH6s4s6s4s", 1, 0x0800, 6, 4, 1, mac_bytes(src_mac),
                       socket.inet_aton("10.0.0.1"), b"\x00" * 6, socket.inet_aton("10.0.0.2"))
    return ethernet(src_mac, "ff:ff:ff:ff:ff:ff", 0x0806, body)


def write_frames(path: Path, frames: list[bytes], big_endian: bool = False, start: float = 1_500_000_000.0) -> Path:
    path.write_bytes(pcap_bytes(((start + i * 0.001, f) for i, f in enumerate(frames)), big_endian=big_endian))
    return path


# -------------------- SYNTHETIC DEVICES --------------------

def device_mac(k: int) -> str:
    return f"02:00:00:00:00:{k + 1:02x}"


def device_label(k: int) -> str:
    return f"device-{k}"


def device_payload(k: int, rng: np.random.Generator) -> bytes:
    """
    Four 96-byte blocks. Devices 0-3 put high bytes in their own block and low
    noise elsewhere; device 4 fills every block with mid-range bytes.
    """
    blocks = []
    for b in range(BLOCKS):
        if k >= BLOCKS:
            blocks.append(rng.integers(50, 101, BLOCK, dtype=np.uint8))
        elif b == k:
            blocks.append(rng.integers(170, 256, BLOCK, dtype=np.uint8))
        else:
            blocks.append(rng.integers(0, 41, BLOCK, dtype=np.uint8))
    return np.concatenate(blocks).tobytes()


def device_frames(k: int, sessions: int, seed: int) -> list[bytes]:
    """Handshake plus one client and one server data packet per session."""
    rng = np.random.default_rng(seed + k)
    mac = device_mac(k)
    client_ip = f"10.0.0.{10 + k}"
    server = (SERVER_IP, 443)
    frames = []
    for s in range(sessions):
        client = (client_ip, 1024 + s)
        payload = device_payload(k, rng)
        frames.append(tcp_frame(client, server, b"", mac, SERVER_MAC, TH_SYN))
        frames.append(tcp_frame(server, client, b"", SERVER_MAC, mac, TH_SYN | TH_ACK))
        frames.append(tcp_frame(client, server, b"", mac, SERVER_MAC, TH_ACK))
        frames.append(tcp_frame(client, server, payload[:200], mac, SERVER_MAC))
        frames.append(tcp_frame(server, client, payload[200:], SERVER_MAC, mac))
    return frames


def write_synthetic_capture(directory: Path, devices: int = SYNTHETIC_DEVICES,
                            sessions: int = SYNTHETIC_SESSIONS, seed: int = 7) -> tuple[list[Path], Path]:
    """One pcap per device plus a MAC map naming them device-0 ... device-N."""
    directory.mkdir(parents=True, exist_ok=True)
    paths = [write_frames(directory / f"{device_label(k)}.pcap", device_frames(k, sessions, seed))
             for k in range(devices)]
    mac_map = directory / "mac_map.json"
    mac_map.write_text(json.dumps({device_mac(k): device_label(k) for k in range(devices)}))
    return paths, mac_map


def synthetic_features(devices: int, per_device: int, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Fingerprint matrix (uint8, 784 wide) and labels without going through pcaps."""
    rng = np.random.default_rng(seed)
    rows, labels = [], []
    for k in range(devices):
        for _ in range(per_device):
            row = np.zeros(Config.INPUT_WIDTH, dtype=np.uint8)
            payload = np.frombuffer(device_payload(k, rng), dtype=np.uint8)
            row[:len(payload)] = payload
            rows.append(row)
            labels.append(k)
    return np.stack(rows), np.array(labels, dtype=np.int64)


@pytest.fixture(scope="session")
def synthetic_capture(tmp_path_factory):
    return write_synthetic_capture(tmp_path_factory.mktemp("capture"))


@pytest.fixture
def held_out_matrices():
    return json.loads((DATA_DIR / "held_out_matrices.json").read_text())


@pytest.fixture
def full_matrix():
    return json.loads((DATA_DIR / "full_matrix.json").read_text())
