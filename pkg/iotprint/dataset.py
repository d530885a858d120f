"""
Labeled Datasets
----------------
Builds labeled fingerprint datasets from grouped session payloads, applies the
"more than N sessions" device rule, splits stratified 80/10/10, and reads and
writes MNIST-style IDX files.

IDX layout (big-endian):
  images: magic 0x00000803, N, 28, 28, then N·784 bytes
  labels: magic 0x00000801, N, then N label bytes
"""

from __future__ import annotations
import gzip
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import pyarrow as pa

from iotprint.config import Config
from iotprint.errors import ConfigError, ConsistencyError, DataError, FormatError
from iotprint.fingerprint import FINGERPRINT_SIZE, PayloadFingerprint, normalize, unique_indices
from iotprint.storage import (
    StoredSession,
    read_json,
    read_table,
    utc_stamp,
    write_bytes,
    write_json,
    write_table,
)

logger = Config.setup_logger(__name__)

IDX_IMAGE_MAGIC: int = 0x00000803
IDX_LABEL_MAGIC: int = 0x00000801
SPLIT_TAGS: tuple[str, ...] = ("train", "validation", "test", "unsplit")

IMAGES_FILE = "images-idx3-ubyte"
LABELS_FILE = "labels-idx1-ubyte"
FINGERPRINT_INDEX = "fingerprints.parquet"
DATASET_MANIFEST = "dataset_manifest.json"

FINGERPRINT_SCHEMA = pa.schema([
    ("row", pa.int64()),
    ("label", pa.int64()),
    ("label_name", pa.string()),
    ("digest", pa.string()),
    ("file_id", pa.string()),
    ("session_id", pa.int64()),
])


# -------------------- DOMAIN TYPES --------------------

@dataclass(eq=False)
class LabeledDataset:
    features: np.ndarray  # (N, 784) uint8
    labels: np.ndarray  # (N,) int64
    label_names: tuple[str, ...]
    split_tag: str = "unsplit"
    digests: tuple[str, ...] | None = None

    def __post_init__(self) -> None:
        self.features = np.asarray(self.features, dtype=np.uint8).reshape(-1, FINGERPRINT_SIZE)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        self.label_names = tuple(self.label_names)
        if len(self.features) != len(self.labels):
            raise DataError(f"{len(self.features)} fingerprints but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= len(self.label_names)):
            raise DataError(f"labels must lie in [0, {len(self.label_names)})")
        if len(set(self.label_names)) != len(self.label_names):
            raise DataError(f"duplicate label names: {self.label_names}")
        if self.split_tag not in SPLIT_TAGS:
            raise DataError(f"unknown split tag {self.split_tag!r}")
        if self.digests is not None:
            self.digests = tuple(self.digests)
            if len(self.digests) != len(self.labels):
                raise DataError("digests must align with fingerprints")

    def __len__(self) -> int:
        return len(self.labels)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, LabeledDataset):
            return NotImplemented
        return (
            self.label_names == other.label_names
            and np.array_equal(self.features, other.features)
            and np.array_equal(self.labels, other.labels)
        )

    @classmethod
    def from_fingerprints(
        cls,
        fingerprints: Sequence[PayloadFingerprint],
        labels: Sequence[int],
        label_names: Sequence[str],
        split_tag: str = "unsplit",
    ) -> LabeledDataset:
        features = np.frombuffer(b"".join(fp.data for fp in fingerprints), dtype=np.uint8)
        return cls(
            features.reshape(len(fingerprints), FINGERPRINT_SIZE),
            np.asarray(labels, dtype=np.int64),
            tuple(label_names),
            split_tag,
            tuple(fp.source_digest for fp in fingerprints),
        )

    def subset(self, indices: np.ndarray, split_tag: str | None = None) -> LabeledDataset:
        indices = np.asarray(indices, dtype=np.int64)
        digests = tuple(self.digests[i] for i in indices) if self.digests is not None else None
        return LabeledDataset(
            self.features[indices], self.labels[indices], self.label_names,
            split_tag or self.split_tag, digests,
        )

    def class_counts(self) -> dict[str, int]:
        counts = np.bincount(self.labels, minlength=len(self.label_names))
        return {name: int(n) for name, n in zip(self.label_names, counts)}


@dataclass(frozen=True)
class SplitPolicy:
    validation_fraction: float = 0.10
    test_fraction: float = 0.10
    rng_seed: int = 0

    def __post_init__(self) -> None:
        if not (0 < self.validation_fraction and 0 < self.test_fraction):
            raise ConfigError("split fractions must be positive")
        if self.validation_fraction + self.test_fraction >= 1:
            raise ConfigError("validation_fraction + test_fraction must be < 1")


# -------------------- DEVICE FILTER --------------------

def filter_devices(counts: Mapping[str, int], min_sessions: int = Config.MIN_SESSIONS) -> set[str]:
    """Keep labels with strictly more than min_sessions sessions."""
    retained = {label for label, n in counts.items() if n > min_sessions}
    excluded = sorted(set(counts) - retained)
    if excluded:
        logger.info(
            "Excluded %d label(s) with <= %d sessions: %s",
            len(excluded), min_sessions, ", ".join(f"{l} ({counts[l]})" for l in excluded),
        )
    return retained


# -------------------- DATASET ASSEMBLY --------------------

def resolve_label_order(labels: Sequence[str], order: Sequence[str] | str | None = None) -> tuple[str, ...]:
    """
    Class-index order: alphabetical by default, the given explicit list (labels
    not listed are appended alphabetically), or a named order such as "reference".
    """
    present = set(labels)
    if order is None or order == "alphabetical":
        return tuple(sorted(present))
    if isinstance(order, str):
        if order != "reference":
            raise ConfigError(f"unknown label order {order!r}")
        from iotprint.published import REFERENCE_CLASS_ORDER
        order = REFERENCE_CLASS_ORDER
    head = [name for name in order if name in present]
    tail = sorted(present - set(head))
    return tuple(head + tail)


def build_dataset(
    sessions: Sequence[StoredSession],
    min_sessions: int = Config.MIN_SESSIONS,
    label_order: Sequence[str] | str | None = None,
) -> tuple[LabeledDataset, list[StoredSession], dict[str, int]]:
    """
    Dedupe per label, apply the device filter on the deduplicated counts, and
    normalize every surviving payload. Returns the dataset, the session behind
    each row, and the per-label counts before filtering.
    """
    by_label: dict[str, list[StoredSession]] = {}
    for session in sessions:
        by_label.setdefault(session.label, []).append(session)

    kept: dict[str, list[StoredSession]] = {}
    for label, items in by_label.items():
        indices = unique_indices([s.payload for s in items])
        removed = len(items) - len(indices)
        if removed:
            logger.info("%s: removed %d empty/duplicate sessions", label, removed)
        kept[label] = [items[i] for i in indices]

    counts = {label: len(items) for label, items in kept.items()}
    retained = filter_devices(counts, min_sessions)
    names = resolve_label_order(sorted(retained), label_order)
    if not names:
        raise DataError("no device has enough usable sessions to build a dataset")

    fingerprints: list[PayloadFingerprint] = []
    labels: list[int] = []
    rows: list[StoredSession] = []
    for index, name in enumerate(names):
        for session in kept[name]:
            fingerprints.append(normalize(session.payload, (session.file_id, session.key)))
            labels.append(index)
            rows.append(session)

    dataset = LabeledDataset.from_fingerprints(fingerprints, labels, names)
    logger.info("Built dataset: %d fingerprints, %d classes", len(dataset), len(names))
    return dataset, rows, counts


# -------------------- SPLIT --------------------

def _round_half_up(value: float) -> int:
    return int(np.floor(value + 0.5))


def split(dataset: LabeledDataset, policy: SplitPolicy = SplitPolicy()) -> tuple[LabeledDataset, LabeledDataset, LabeledDataset]:
    """Stratified random split into train/validation/test, deterministic for a seed."""
    if dataset.split_tag != "unsplit":
        raise DataError(f"dataset is already split ({dataset.split_tag})")
    if len(dataset) < 10:
        raise DataError(f"need at least 10 instances to split, got {len(dataset)}")

    rng = np.random.default_rng(policy.rng_seed)
    parts: dict[str, list[np.ndarray]] = {"train": [], "validation": [], "test": []}
    for label in range(len(dataset.label_names)):
        members = np.flatnonzero(dataset.labels == label)
        if not len(members):
            continue
        shuffled = rng.permutation(members)
        n_val = _round_half_up(policy.validation_fraction * len(members))
        n_test = _round_half_up(policy.test_fraction * len(members))
        parts["validation"].append(shuffled[:n_val])
        parts["test"].append(shuffled[n_val:n_val + n_test])
        parts["train"].append(shuffled[n_val + n_test:])

    def _take(tag: str) -> LabeledDataset:
        chosen = np.sort(np.concatenate(parts[tag])) if parts[tag] else np.empty(0, dtype=np.int64)
        return dataset.subset(chosen, tag)

    train_set, val_set, test_set = _take("train"), _take("validation"), _take("test")
    logger.info("Split %d instances → train %d / validation %d / test %d (seed %d)",
                len(dataset), len(train_set), len(val_set), len(test_set), policy.rng_seed)
    return train_set, val_set, test_set


# -------------------- IDX I/O --------------------

def _open_read(path: Path) -> bytes:
    path = Path(path)
    if path.suffix == ".gz":
        with gzip.open(path, "rb") as f:
            return f.read()
    return path.read_bytes()


def write_idx(dataset: LabeledDataset, image_path: Path, label_path: Path) -> None:
    if not len(dataset):
        raise DataError("refusing to write an empty dataset")
    if len(dataset.label_names) > 256:
        raise DataError("IDX label files hold one byte per label (max 256 classes)")
    n = len(dataset)
    side = Config.IMAGE_SIDE
    image_header = struct.pack(">IIII", IDX_IMAGE_MAGIC, n, side, side)
    label_header = struct.pack(">II", IDX_LABEL_MAGIC, n)
    write_bytes(image_path, image_header + dataset.features.astype(np.uint8).tobytes())
    write_bytes(label_path, label_header + dataset.labels.astype(np.uint8).tobytes())


def read_idx_header(path: Path) -> tuple[int, tuple[int, ...]]:
    """Magic and dimension sizes of an IDX file."""
    data = _open_read(path)
    if len(data) < 8:
        raise FormatError(f"{path}: too short for an IDX header ({len(data)} bytes)")
    magic = struct.unpack(">I", data[:4])[0]
    ndim = magic & 0xFF
    if len(data) < 4 + 4 * ndim:
        raise FormatError(f"{path}: truncated IDX header")
    dims = struct.unpack(f">{ndim}I", data[4:4 + 4 * ndim])
    return magic, dims


def read_idx(
    image_path: Path,
    label_path: Path,
    label_names: Sequence[str] | None = None,
    split_tag: str = "unsplit",
) -> LabeledDataset:
    images = _open_read(image_path)
    labels = _open_read(label_path)

    if len(images) < 16:
        raise FormatError(f"{image_path}: too short for an IDX image header ({len(images)} bytes)")
    magic, n, rows, cols = struct.unpack(">IIII", images[:16])
    if magic == IDX_LABEL_MAGIC:
        raise ConsistencyError(f"{image_path}: label file found in the image slot")
    if magic != IDX_IMAGE_MAGIC:
        raise FormatError(f"{image_path}: bad image magic 0x{magic:08X}")
    if rows * cols != FINGERPRINT_SIZE:
        raise FormatError(f"{image_path}: images are {rows}x{cols}, expected {FINGERPRINT_SIZE} pixels")
    if len(images) != 16 + n * rows * cols:
        raise FormatError(f"{image_path}: expected {16 + n * rows * cols} bytes, found {len(images)}")

    if len(labels) < 8:
        raise FormatError(f"{label_path}: too short for an IDX label header ({len(labels)} bytes)")
    label_magic, label_n = struct.unpack(">II", labels[:8])
    if label_magic == IDX_IMAGE_MAGIC:
        raise ConsistencyError(f"{label_path}: image file found in the label slot")
    if label_magic != IDX_LABEL_MAGIC:
        raise FormatError(f"{label_path}: bad label magic 0x{label_magic:08X}")
    if label_n != n:
        raise ConsistencyError(f"{image_path} holds {n} images but {label_path} holds {label_n} labels")
    if len(labels) != 8 + n:
        raise FormatError(f"{label_path}: expected {8 + n} bytes, found {len(labels)}")

    features = np.frombuffer(images, dtype=np.uint8, offset=16).reshape(n, rows * cols).copy()
    label_arr = np.frombuffer(labels, dtype=np.uint8, offset=8).astype(np.int64)
    if label_names is None:
        width = int(label_arr.max()) + 1 if n else 0
        label_names = tuple(f"class_{i}" for i in range(width))
    return LabeledDataset(features, label_arr, tuple(label_names), split_tag)


# -------------------- DATASET DIRECTORIES --------------------

def save_dataset(dataset: LabeledDataset, out_dir: Path, prefix: str = "", rows: Sequence[StoredSession] | None = None,
                 manifest: Mapping[str, object] | None = None) -> Path:
    """IDX pair + provenance parquet + JSON manifest in one directory."""
    out_dir = Path(out_dir)
    write_idx(dataset, out_dir / f"{prefix}{IMAGES_FILE}", out_dir / f"{prefix}{LABELS_FILE}")
    index_rows = []
    for row in range(len(dataset)):
        label = int(dataset.labels[row])
        source = rows[row] if rows is not None else None
        index_rows.append({
            "row": row,
            "label": label,
            "label_name": dataset.label_names[label],
            "digest": dataset.digests[row] if dataset.digests is not None else None,
            "file_id": source.file_id if source else None,
            "session_id": source.session_id if source else None,
        })
    write_table(out_dir / f"{prefix}{FINGERPRINT_INDEX}", index_rows, FINGERPRINT_SCHEMA)
    body = {
        "label_names": list(dataset.label_names),
        "split_tag": dataset.split_tag,
        "count": len(dataset),
        "class_counts": dataset.class_counts(),
        "images": f"{prefix}{IMAGES_FILE}",
        "labels": f"{prefix}{LABELS_FILE}",
    }
    body.update(manifest or {})
    body["created_at"] = utc_stamp()
    write_json(out_dir / f"{prefix}{DATASET_MANIFEST}", body)
    return out_dir


def load_dataset(dataset_dir: Path, prefix: str = "") -> LabeledDataset:
    dataset_dir = Path(dataset_dir)
    manifest = read_json(dataset_dir / f"{prefix}{DATASET_MANIFEST}")
    dataset = read_idx(
        dataset_dir / manifest["images"],
        dataset_dir / manifest["labels"],
        manifest["label_names"],
        manifest.get("split_tag", "unsplit"),
    )
    index_path = dataset_dir / f"{prefix}{FINGERPRINT_INDEX}"
    if index_path.exists():
        rows = sorted(read_table(index_path), key=lambda r: r["row"])
        if len(rows) == len(dataset) and all(r["digest"] for r in rows):
            dataset.digests = tuple(r["digest"] for r in rows)
    return dataset
