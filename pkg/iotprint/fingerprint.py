"""
Payload Fingerprints
--------------------
Session payload → fixed 784-byte fingerprint, plus the optional 28×28
grayscale rendering.

  • extract_payload: TCP payload bytes of both directions, in capture order
  • dedupe: drop empty payloads and repeated byte strings (first one wins)
  • normalize: trim to / zero-pad up to 784 bytes
  • to_image / from_image: row-major 28×28 raster, lossless both ways
  • write_pgm / write_png / write_bin: artifacts for inspection and interop
"""

from __future__ import annotations
import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from iotprint.capture_ingest import SessionKey, SessionRecord
from iotprint.config import Config
from iotprint.errors import PreconditionError, ShapeError


FINGERPRINT_SIZE: int = Config.INPUT_WIDTH
IMAGE_SIDE: int = Config.IMAGE_SIDE


def payload_digest(payload: bytes) -> str:
    """SHA-256 of the full, untrimmed payload."""
    return hashlib.sha256(payload).hexdigest()


@dataclass(frozen=True)
class PayloadFingerprint:
    data: bytes
    source_digest: str
    origin: tuple[str, SessionKey] | None = None

    def __post_init__(self) -> None:
        if len(self.data) != FINGERPRINT_SIZE:
            raise ShapeError(f"fingerprint must be {FINGERPRINT_SIZE} bytes, got {len(self.data)}")

    def as_array(self) -> np.ndarray:
        return np.frombuffer(self.data, dtype=np.uint8)


# -------------------- PAYLOAD EXTRACTION --------------------

def extract_payload(session: SessionRecord) -> bytes:
    """Concatenate the TCP payloads of every packet, both directions, in capture order."""
    ordered = sorted(session.packets, key=lambda p: p.capture_order)
    return b"".join(p.payload for p in ordered)


def unique_indices(payloads: Sequence[bytes]) -> list[int]:
    """Indices of the first occurrence of each distinct non-empty payload."""
    seen: set[str] = set()
    kept: list[int] = []
    for i, payload in enumerate(payloads):
        if not payload:
            continue
        digest = payload_digest(payload)
        if digest in seen:
            continue
        seen.add(digest)
        kept.append(i)
    return kept


def dedupe(payloads: Sequence[bytes]) -> list[bytes]:
    """Remove empty and duplicate payloads, preserving first-occurrence order."""
    return [payloads[i] for i in unique_indices(payloads)]


# -------------------- NORMALIZATION --------------------

def normalize(payload: bytes, origin: tuple[str, SessionKey] | None = None) -> PayloadFingerprint:
    """Trim a payload to 784 bytes or pad it with 0x00 up to 784 bytes."""
    if not payload:
        raise PreconditionError("cannot fingerprint an empty payload")
    head = bytes(payload[:FINGERPRINT_SIZE])
    data = head + b"\x00" * (FINGERPRINT_SIZE - len(head))
    return PayloadFingerprint(data, payload_digest(bytes(payload)), origin)


# -------------------- IMAGES --------------------

def to_image(fp: PayloadFingerprint | bytes) -> np.ndarray:
    """Row-major 28×28 uint8 raster: pixel (r, c) is byte r·28 + c."""
    data = fp.data if isinstance(fp, PayloadFingerprint) else bytes(fp)
    if len(data) != FINGERPRINT_SIZE:
        raise ShapeError(f"expected {FINGERPRINT_SIZE} bytes, got {len(data)}")
    return np.frombuffer(data, dtype=np.uint8).reshape(IMAGE_SIDE, IMAGE_SIDE).copy()


def from_image(raster: np.ndarray) -> bytes:
    raster = np.asarray(raster)
    if raster.shape != (IMAGE_SIDE, IMAGE_SIDE):
        raise ShapeError(f"expected a {IMAGE_SIDE}x{IMAGE_SIDE} raster, got {raster.shape}")
    return raster.astype(np.uint8).tobytes(order="C")


def write_pgm(fp: PayloadFingerprint | bytes, path: Path) -> Path:
    """Binary PGM (P5, maxval 255)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_image(fp)).save(path, format="PPM")
    return path


def write_png(fp: PayloadFingerprint | bytes, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_image(fp)).save(path, format="PNG")
    return path


def read_image(path: Path) -> bytes:
    """Load a PGM/PNG written by write_pgm/write_png back into fingerprint bytes."""
    with Image.open(path) as img:
        return from_image(np.asarray(img.convert("L")))


def write_bin(fp: PayloadFingerprint, path: Path) -> Path:
    """Raw 784-byte bin file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(fp.data)
    return path
