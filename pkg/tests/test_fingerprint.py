import socket
import struct

import numpy as np
import pytest
from PIL import Image

from iotprint.capture_ingest import SessionKey, SessionPacket, SessionRecord, parse_pcap, pcap_bytes, split_sessions
from iotprint.errors import PreconditionError, ShapeError
from iotprint.fingerprint import (
    FINGERPRINT_SIZE,
    PayloadFingerprint,
    dedupe,
    extract_payload,
    from_image,
    normalize,
    payload_digest,
    read_image,
    to_image,
    write_bin,
    write_pgm,
    write_png,
)

KEY = SessionKey.canonical(("10.0.0.1", 40000), ("10.0.1.1", 443))


def _session(*packets):
    return SessionRecord(KEY, b"\x02\x00\x00\x00\x00\x01", tuple(packets))


def test_extract_concatenates_both_directions_in_capture_order():
    session = _session(
        SessionPacket(True, b"GET", 4),
        SessionPacket(False, b"", 2),
        SessionPacket(False, b"200", 7),
        SessionPacket(True, b"ab", 1),
    )
    assert extract_payload(session) == b"abGET200"


def test_extract_of_handshake_only_session_is_empty():
    assert extract_payload(_session(SessionPacket(True, b"", 0), SessionPacket(False, b"", 1))) == b""


def test_dedupe_drops_empty_and_repeats_keeping_first():
    assert dedupe([b"", b"a", b"b", b"a", b"", b"c", b"b"]) == [b"a", b"b", b"c"]


def test_normalize_pads_short_payloads():
    fp = normalize(b"\x01\x02\x03")
    assert len(fp.data) == FINGERPRINT_SIZE
    assert fp.data[:3] == b"\x01\x02\x03"
    assert fp.data[3:] == b"\x00" * (FINGERPRINT_SIZE - 3)
    assert fp.source_digest == payload_digest(b"\x01\x02\x03")


def test_normalize_trims_long_payloads_but_digests_everything():
    payload = bytes(range(256)) * 4
    fp = normalize(payload)
    assert fp.data == payload[:FINGERPRINT_SIZE]
    assert fp.source_digest == payload_digest(payload)


def test_normalize_exact_length_is_identity():
    payload = bytes([7]) * FINGERPRINT_SIZE
    assert normalize(payload).data == payload


def test_normalize_empty_is_a_precondition_error():
    with pytest.raises(PreconditionError):
        normalize(b"")


def test_fingerprint_rejects_wrong_size():
    with pytest.raises(ShapeError):
        PayloadFingerprint(b"\x00" * 10, "x")


def test_image_is_row_major():
    data = bytes(i % 256 for i in range(FINGERPRINT_SIZE))
    raster = to_image(data)
    assert raster.shape == (28, 28)
    assert raster[1, 0] == 28
    assert raster[27, 27] == (FINGERPRINT_SIZE - 1) % 256
    assert from_image(raster) == data


def test_from_image_rejects_other_shapes():
    with pytest.raises(ShapeError):
        from_image(np.zeros((27, 28), dtype=np.uint8))


def test_pgm_and_png_dumps_preserve_bytes(tmp_path):
    fp = normalize(bytes(np.random.default_rng(1).integers(0, 256, 500, dtype=np.uint8)))
    pgm = write_pgm(fp, tmp_path / "a" / "x.pgm")
    png = write_png(fp, tmp_path / "a" / "x.png")
    assert pgm.read_bytes().startswith(b"P5")
    with Image.open(pgm) as img:
        assert img.size == (28, 28)
        assert img.mode == "L"
    assert read_image(pgm) == fp.data
    assert read_image(png) == fp.data


def test_bin_dump_is_raw_fingerprint(tmp_path):
    fp = normalize(b"abc")
    assert write_bin(fp, tmp_path / "x.bin").read_bytes() == fp.data


# -------------------- PROPERTIES --------------------

def _frame_with_options(src, dst, payload, ihl, offset):
    """Ethernet/IPv4/TCP frame whose IP and TCP headers carry NOP option padding."""
    tcp = struct.pack(">HHIIBBHHH", src[1], dst[1], 0, 0, offset << 4, 0x18, 65535, 0, 0)
    tcp += b"\x01" * (offset * 4 - 20) + payload
    ip = struct.pack(">BBHHHBBH4s4s", 0x40 | ihl, 0, ihl * 4 + len(tcp), 0, 0, 64, 6, 0,
                     socket.inet_aton(src[0]), socket.inet_aton(dst[0]))
    ip += b"\x01" * (ihl * 4 - 20)
    return b"\x02\x00\x00\x00\x00\xfe\x02\x00\x00\x00\x00\x01\x08\x00" + ip + tcp


def _payload_by_header_lengths(frame):
    ihl = frame[14] & 0x0F
    offset = frame[14 + ihl * 4 + 12] >> 4
    total = struct.unpack(">H", frame[16:18])[0]
    return frame[14 + ihl * 4 + offset * 4:14 + total]


def test_extract_matches_slicing_at_the_header_lengths():
    rng = np.random.default_rng(8)
    client, server = ("10.0.0.5", 41000), ("10.0.1.1", 443)
    for _ in range(20):
        frames = []
        for _ in range(10):
            src, dst = (client, server) if rng.random() < 0.5 else (server, client)
            payload = bytes(rng.integers(0, 256, int(rng.integers(0, 61)), dtype=np.uint8))
            frames.append(_frame_with_options(src, dst, payload, int(rng.integers(5, 9)), int(rng.integers(5, 11))))
        packets = parse_pcap(pcap_bytes((i * 0.001, f) for i, f in enumerate(frames)))
        (session,) = split_sessions(packets)
        assert extract_payload(session) == b"".join(_payload_by_header_lengths(f) for f in frames)


def test_dedupe_keeps_first_occurrences_of_distinct_payloads():
    rng = np.random.default_rng(3)
    for _ in range(50):
        pool = [bytes(rng.integers(0, 256, int(rng.integers(0, 6)), dtype=np.uint8)) for _ in range(8)]
        payloads = [pool[int(i)] for i in rng.integers(0, len(pool), 30)]
        result = dedupe(payloads)
        expected = sorted(set(payloads) - {b""}, key=payloads.index)
        assert result == expected
        assert dedupe(result) == result
        assert dedupe(dedupe(payloads)) == dedupe(payloads)


def test_image_round_trip_of_random_fingerprints():
    rng = np.random.default_rng(12)
    for _ in range(50):
        data = bytes(rng.integers(0, 256, FINGERPRINT_SIZE, dtype=np.uint8))
        raster = to_image(data)
        assert raster.dtype == np.uint8
        assert from_image(raster) == data
        assert to_image(normalize(data)).tobytes() == data
