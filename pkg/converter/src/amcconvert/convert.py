"""Archive reading, container writing, and verification.

The archive is the classic pickled dict mapping (modulation name, snr_db)
to an (N, 2, 128) float array. Conversion is a pure format shim: floats
pass through bit-exactly, no normalization or preprocessing.

Container layout (little-endian, no compression):
  magic "AMC1" | version u32=1 | class_count u16
  per class: name length u16 + UTF-8 bytes
  record_count u64
  per record: label u16 | snr_db i16 | 256 x f32 (I[0..128) then Q[0..128))

Split metadata rides in a JSON sidecar `<container>.meta.json` holding the
seed and train/test index lists (the byte layout has no slot for it).
"""

from __future__ import annotations

import json
import pickle
import struct

import numpy as np

MAGIC = b"AMC1"
VERSION = 1
RECORD_BYTES = 2 + 2 + 256 * 4


class ArchiveError(ValueError):
    """The input pickle does not look like an RML-style archive."""


class ContainerError(ValueError):
    """Container bytes violate the format; carries the offending offset."""

    def __init__(self, message, offset=None):
        super().__init__(message if offset is None else f"{message} (byte offset {offset})")
        self.offset = offset


def load_archive(path):
    """dict {(mod_name, snr_db): (N, 2, 128) float32 array}, validated."""
    with open(path, "rb") as f:
        raw = pickle.load(f, encoding="latin1")
    if not isinstance(raw, dict) or not raw:
        raise ArchiveError("archive must be a non-empty dict keyed by (modulation, snr)")
    archive = {}
    for key, value in raw.items():
        if (not isinstance(key, tuple) or len(key) != 2
                or not isinstance(key[0], str) or not isinstance(key[1], (int, np.integer))):
            raise ArchiveError(f"malformed archive key {key!r}: want (modulation name, snr_db)")
        arr = np.asarray(value, dtype=np.float32)
        if arr.ndim != 3 or arr.shape[1:] != (2, 128):
            raise ArchiveError(f"records under key {key!r} have shape {arr.shape}, want (N, 2, 128)")
        archive[(key[0], int(key[1]))] = arr
    return archive


def convert(archive_path, out_path, train_fraction=0.5, seed=0):
    """Write the container plus its split sidecar; returns a small report.

    Labels follow alphabetical class-name order. The train/test split is
    stratified per (class, snr) group and recorded in the sidecar.
    """
    if not 0.0 <= train_fraction <= 1.0:
        raise ArchiveError(f"train fraction {train_fraction} outside [0, 1]")
    archive = load_archive(archive_path)
    names = sorted({mod for mod, _ in archive})
    label_of = {name: i for i, name in enumerate(names)}

    # flat record order: by (class, snr, position) - independent of dict order
    groups = sorted(archive.items(), key=lambda kv: (label_of[kv[0][0]], kv[0][1]))
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0xC0DE)))
    total = sum(arr.shape[0] for _, arr in groups)

    train_idx, test_idx = [], []
    with open(out_path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<H", len(names)))
        for name in names:
            raw = name.encode("utf-8")
            f.write(struct.pack("<H", len(raw)))
            f.write(raw)
        f.write(struct.pack("<Q", total))
        base = 0
        for (mod, snr), arr in groups:
            n = arr.shape[0]
            table = np.empty(n, dtype=[("label", "<u2"), ("snr", "<i2"), ("iq", "<f4", (256,))])
            table["label"] = label_of[mod]
            table["snr"] = snr
            table["iq"][:, :128] = arr[:, 0, :]
            table["iq"][:, 128:] = arr[:, 1, :]
            f.write(table.tobytes())
            order = rng.permutation(n)
            n_train = int(round(n * train_fraction))
            train_idx.extend(sorted(int(base + i) for i in order[:n_train]))
            test_idx.extend(sorted(int(base + i) for i in order[n_train:]))
            base += n

    with open(str(out_path) + ".meta.json", "w") as f:
        json.dump({"seed": seed, "train_indices": sorted(train_idx),
                   "test_indices": sorted(test_idx)}, f)
    return {"records": total, "classes": names,
            "snr_levels": sorted({snr for _, snr in archive})}


# ---------------------------------------------------------------------------
# verification


def _need(buf, offset, count, what):
    if offset + count > len(buf):
        raise ContainerError(f"truncated container while reading {what}", offset=offset)
    return buf[offset: offset + count], offset + count


def verify(path):
    """Validate the container; returns histograms and a payload checksum."""
    import hashlib

    with open(path, "rb") as f:
        buf = f.read()
    chunk, off = _need(buf, 0, 4, "magic")
    if chunk != MAGIC:
        raise ContainerError(f"bad magic {chunk!r}", offset=0)
    chunk, off = _need(buf, off, 4, "version")
    if struct.unpack("<I", chunk)[0] != VERSION:
        raise ContainerError("unsupported version", offset=4)
    chunk, off = _need(buf, off, 2, "class count")
    n_classes = struct.unpack("<H", chunk)[0]
    names = []
    for i in range(n_classes):
        chunk, off = _need(buf, off, 2, f"class {i} name length")
        ln = struct.unpack("<H", chunk)[0]
        chunk, off = _need(buf, off, ln, f"class {i} name")
        names.append(chunk.decode("utf-8"))
    chunk, off = _need(buf, off, 8, "record count")
    n_records = struct.unpack("<Q", chunk)[0]
    payload, end = _need(buf, off, n_records * RECORD_BYTES, "record payload")
    if end != len(buf):
        raise ContainerError("trailing bytes after final record", offset=end)

    table = np.frombuffer(payload, dtype=[("label", "<u2"), ("snr", "<i2"), ("iq", "<f4", (256,))])
    class_hist = {name: 0 for name in names}
    snr_hist = {}
    digest = hashlib.sha256()
    for i in range(n_records):
        label = int(table[i]["label"])
        if label >= n_classes:
            raise ContainerError(f"record {i} label {label} >= class count {n_classes}",
                                 offset=off + i * RECORD_BYTES)
        if not np.all(np.isfinite(table[i]["iq"])):
            raise ContainerError(f"record {i} has non-finite samples",
                                 offset=off + i * RECORD_BYTES + 4)
        class_hist[names[label]] += 1
        snr_hist[int(table[i]["snr"])] = snr_hist.get(int(table[i]["snr"]), 0) + 1
    digest.update(payload)
    return {
        "records": int(n_records),
        "classes": names,
        "class_histogram": class_hist,
        "snr_histogram": {int(k): v for k, v in sorted(snr_hist.items())},
        "sha256": digest.hexdigest(),
    }
