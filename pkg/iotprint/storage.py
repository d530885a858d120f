"""
Artifact Storage
----------------
Every file the pipeline writes goes through here: JSON manifests, text and
CSV reports, IDX bytes, parquet tables and the session store. Writes land in a
sibling temp file that then replaces the target, so an interrupted run never
leaves a half-written artifact behind.
"""

from __future__ import annotations
import json
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping, Sequence

import pendulum
import pyarrow as pa
import pyarrow.parquet as pq

from iotprint.capture_ingest import RawPacket, SessionKey, SessionRecord, write_pcap
from iotprint.config import Config
from iotprint.errors import FormatError
from iotprint.fingerprint import extract_payload, payload_digest

logger = Config.setup_logger(__name__)

SESSION_INDEX: str = "sessions.parquet"
SPLIT_MANIFEST: str = "split_manifest.json"

SESSION_SCHEMA = pa.schema([
    ("session_id", pa.int64()),
    ("label", pa.string()),
    ("file_id", pa.string()),
    ("initiator_mac", pa.string()),
    ("endpoint_lo", pa.string()),
    ("endpoint_hi", pa.string()),
    ("protocol", pa.int64()),
    ("packet_count", pa.int64()),
    ("payload_length", pa.int64()),
    ("digest", pa.string()),
    ("payload_file", pa.string()),
])


# -------------------- GENERIC WRITERS --------------------

def utc_stamp() -> str:
    """Manifest timestamp; never part of determinism comparisons."""
    return pendulum.now("UTC").to_iso8601_string()


def slugify(label: str) -> str:
    slug = re.sub(r"[^0-9a-z]+", "-", label.lower()).strip("-")
    return slug or "label"


def write_bytes(path: Path, data: bytes) -> Path:
    """Write atomically: temp file first, then replace the target."""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp_path = path.with_name(path.name + ".tmp")
        tmp_path.write_bytes(data)
        tmp_path.replace(path)
    except OSError as e:
        raise OSError(f"failed writing {path}: {e}") from e
    return path


def write_text(path: Path, text: str) -> Path:
    return write_bytes(path, text.encode("utf-8"))


def write_json(path: Path, payload: Mapping[str, Any], indent: int | None = 2) -> Path:
    """JSON with keys in insertion order, so identical inputs give identical bytes."""
    return write_text(path, json.dumps(payload, indent=indent) + "\n")


def read_json(path: Path) -> dict[str, Any]:
    path = Path(path)
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise FormatError(f"{path} is not valid JSON: {e}") from e


def write_table(path: Path, rows: Sequence[Mapping[str, Any]], schema: pa.Schema) -> Path:
    """Write rows to parquet via a temp file (replace original only if successful)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    table = pa.Table.from_pylist(list(rows), schema=schema)
    tmp_path = path.with_suffix(".tmp.parquet")
    pq.write_table(table, tmp_path, compression="snappy")
    tmp_path.replace(path)
    return path


def read_table(path: Path) -> list[dict[str, Any]]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Missing parquet file: {path}")
    return pq.read_table(path).to_pylist()


# -------------------- SESSION STORE --------------------

@dataclass(frozen=True)
class StoredSession:
    session_id: int
    label: str
    file_id: str
    initiator_mac: str
    key: SessionKey
    packet_count: int
    payload: bytes


def _format_endpoint(endpoint: tuple[str, int]) -> str:
    return f"{endpoint[0]}:{endpoint[1]}"


def _parse_endpoint(text: str) -> tuple[str, int]:
    ip, _, port = text.rpartition(":")
    return ip, int(port)


def write_session_store(
    out_dir: Path,
    grouped: Mapping[str, Sequence[SessionRecord]],
    raw_by_file: Mapping[str, Sequence[RawPacket]] | None = None,
    emit_pcaps: bool = False,
) -> list[dict[str, Any]]:
    """
    Persist grouped sessions as an index (parquet) plus one raw payload file per
    non-empty session. With emit_pcaps, every session is also written as its own
    pcap under sessions/<label>/, one folder per device.
    """
    out_dir = Path(out_dir)
    rows: list[dict[str, Any]] = []
    session_id = 0
    for label in sorted(grouped):
        slug = slugify(label)
        for session in grouped[label]:
            payload = extract_payload(session)
            payload_file = None
            if payload:
                payload_file = f"payloads/{slug}/{session_id:07d}.bin"
                write_bytes(out_dir / payload_file, payload)
            if emit_pcaps and raw_by_file is not None:
                by_order = raw_by_file[session.file_id]
                frames = [by_order[p.capture_order] for p in session.packets]
                pcap_path = out_dir / "sessions" / slug / f"{session_id:07d}.pcap"
                pcap_path.parent.mkdir(parents=True, exist_ok=True)
                write_pcap(frames, pcap_path)
            rows.append({
                "session_id": session_id,
                "label": label,
                "file_id": session.file_id,
                "initiator_mac": session.initiator_mac_str,
                "endpoint_lo": _format_endpoint(session.key.endpoint_lo),
                "endpoint_hi": _format_endpoint(session.key.endpoint_hi),
                "protocol": session.key.protocol,
                "packet_count": len(session.packets),
                "payload_length": len(payload),
                "digest": payload_digest(payload) if payload else None,
                "payload_file": payload_file,
            })
            session_id += 1

    write_table(out_dir / SESSION_INDEX, rows, SESSION_SCHEMA)
    logger.info("Wrote %d sessions across %d labels to %s", len(rows), len(grouped), out_dir)
    return rows


def read_session_store(store_dir: Path) -> list[StoredSession]:
    """Load the session index and its payload files, ordered by session id."""
    store_dir = Path(store_dir)
    rows = read_table(store_dir / SESSION_INDEX)
    sessions: list[StoredSession] = []
    for row in sorted(rows, key=lambda r: r["session_id"]):
        payload = b""
        if row["payload_file"]:
            payload = (store_dir / row["payload_file"]).read_bytes()
            if payload_digest(payload) != row["digest"]:
                raise FormatError(f"{store_dir / row['payload_file']}: payload digest mismatch")
        key = SessionKey(
            _parse_endpoint(row["endpoint_lo"]),
            _parse_endpoint(row["endpoint_hi"]),
            int(row["protocol"]),
        )
        sessions.append(StoredSession(
            int(row["session_id"]), row["label"], row["file_id"], row["initiator_mac"],
            key, int(row["packet_count"]), payload,
        ))
    return sessions
