"""Binary file formats and manifest I/O.

All formats are little-endian, row-major, and platform independent:

  MARSFT01  features    u32 D, u32 H, u32 W, then f32 payload [D][H][W]
  MARSLB01  labels      u32 H, u32 W, then i16 payload [H][W]
  MARSCB01  bank        u32 D, u32 k_fg, u32 k_bg, u32 n, then n records
  MARSHD01  checkpoint  u32 channels, u32 D, f64 weights, f64 bias

Bank records: i32 class_id, u32 cluster_index, u32 member_count,
u32 id_len, utf-8 image id, f64 vector[D].

Writes are atomic (temp file + rename).  The manifest is line-delimited
JSON: a meta line {"embedding_dim": D, "num_classes": C} followed by one
record object per line, with paths stored relative to the manifest.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path
from typing import Optional

import numpy as np

from .core import DatasetManifest, FeatureMap, ImageRecord, LabelMap

MAGIC_FEATURES = b"MARSFT01"
MAGIC_LABELS = b"MARSLB01"
MAGIC_BANK = b"MARSCB01"
MAGIC_CHECKPOINT = b"MARSHD01"

MAX_SPATIAL_DIM = 0xFFFF


class FormatError(ValueError):
    """Malformed binary file; carries the byte offset of the fault."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


def atomic_write_bytes(path, blob: bytes) -> None:
    """Write via a temp file in the same directory, then rename over target."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.offset = 0

    def take(self, n: int, what: str) -> bytes:
        if self.offset + n > len(self.blob):
            raise FormatError(f"payload length mismatch: truncated {what}", self.offset)
        out = self.blob[self.offset : self.offset + n]
        self.offset += n
        return out

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def i32(self, what: str) -> int:
        return struct.unpack("<i", self.take(4, what))[0]

    def expect_magic(self, magic: bytes) -> None:
        got = self.take(8, "magic")
        if got != magic:
            raise FormatError(f"bad magic: expected {magic!r}, got {got!r}", 0)

    def expect_end(self) -> None:
        if self.offset != len(self.blob):
            raise FormatError(
                f"payload length mismatch: {len(self.blob) - self.offset} trailing bytes",
                self.offset,
            )


def _check_spatial(name: str, value: int, offset: int) -> None:
    if value < 1 or value > MAX_SPATIAL_DIM:
        raise FormatError(f"dim overflow: {name}={value} outside [1, {MAX_SPATIAL_DIM}]", offset)


# -- features ----------------------------------------------------------------

def write_feature_map(path, fmap: FeatureMap) -> None:
    d, h, w = fmap.data.shape
    blob = MAGIC_FEATURES + struct.pack("<III", d, h, w)
    blob += np.ascontiguousarray(fmap.data, dtype="<f4").tobytes()
    atomic_write_bytes(path, blob)


def read_feature_map(path) -> FeatureMap:
    r = _Reader(Path(path).read_bytes())
    r.expect_magic(MAGIC_FEATURES)
    d = r.u32("D")
    if d < 1:
        raise FormatError("dim overflow: D must be >= 1", 8)
    h = r.u32("H")
    _check_spatial("H", h, 12)
    w = r.u32("W")
    _check_spatial("W", w, 16)
    payload = r.take(d * h * w * 4, "feature payload")
    r.expect_end()
    data = np.frombuffer(payload, dtype="<f4").reshape(d, h, w)
    return FeatureMap(data)


# -- labels -------------------------------------------------------------------

def write_label_map(path, lmap: LabelMap) -> None:
    h, w = lmap.data.shape
    blob = MAGIC_LABELS + struct.pack("<II", h, w)
    blob += np.ascontiguousarray(lmap.data, dtype="<i2").tobytes()
    atomic_write_bytes(path, blob)


def read_label_map(path, num_classes: Optional[int] = None) -> LabelMap:
    r = _Reader(Path(path).read_bytes())
    r.expect_magic(MAGIC_LABELS)
    h = r.u32("H")
    _check_spatial("H", h, 8)
    w = r.u32("W")
    _check_spatial("W", w, 12)
    payload = r.take(h * w * 2, "label payload")
    r.expect_end()
    data = np.frombuffer(payload, dtype="<i2").reshape(h, w)
    if num_classes is None:
        num_classes = max(1, int(data.max(initial=0)))
    return LabelMap(data, num_classes)


# -- centroid bank ------------------------------------------------------------

def write_centroid_bank(path, bank) -> None:
    from .bank import CentroidBank  # local import avoids a module cycle

    assert isinstance(bank, CentroidBank)
    centroids = list(bank.background)
    for class_id in sorted(bank.foreground):
        centroids.extend(bank.foreground[class_id])
    d = centroids[0].vector.shape[0] if centroids else 0
    parts = [MAGIC_BANK, struct.pack("<IIII", d, bank.k_fg, bank.k_bg, len(centroids))]
    for c in centroids:
        ident = c.image_id.encode("utf-8")
        parts.append(struct.pack("<iIII", c.class_id, c.cluster_index, c.member_count, len(ident)))
        parts.append(ident)
        parts.append(np.ascontiguousarray(c.vector, dtype="<f8").tobytes())
    atomic_write_bytes(path, b"".join(parts))


def read_centroid_bank(path):
    from .bank import Centroid, CentroidBank

    r = _Reader(Path(path).read_bytes())
    r.expect_magic(MAGIC_BANK)
    d = r.u32("D")
    k_fg = r.u32("k_fg")
    k_bg = r.u32("k_bg")
    n = r.u32("count")
    if k_fg < 1 or k_bg < 1:
        raise FormatError("dim overflow: k_fg and k_bg must be >= 1", 12)
    background = []
    foreground: dict[int, list[Centroid]] = {}
    for _ in range(n):
        class_id = r.i32("class_id")
        cluster_index = r.u32("cluster_index")
        member_count = r.u32("member_count")
        id_len = r.u32("id_len")
        image_id = r.take(id_len, "image id").decode("utf-8")
        vec = np.frombuffer(r.take(d * 8, "centroid vector"), dtype="<f8")
        c = Centroid(
            vector=vec,
            class_id=class_id,
            image_id=image_id,
            cluster_index=cluster_index,
            member_count=member_count,
        )
        if class_id == 0:
            background.append(c)
        else:
            foreground.setdefault(class_id, []).append(c)
    r.expect_end()
    return CentroidBank(
        foreground={k: tuple(v) for k, v in foreground.items()},
        background=tuple(background),
        k_fg=k_fg,
        k_bg=k_bg,
    )


# -- segmentation head checkpoint ----------------------------------------------

def write_checkpoint(path, head) -> None:
    channels, d = head.weights.shape
    blob = MAGIC_CHECKPOINT + struct.pack("<II", channels, d)
    blob += np.ascontiguousarray(head.weights, dtype="<f8").tobytes()
    blob += np.ascontiguousarray(head.bias, dtype="<f8").tobytes()
    atomic_write_bytes(path, blob)


def read_checkpoint(path):
    from .trainloop import SegHead

    r = _Reader(Path(path).read_bytes())
    r.expect_magic(MAGIC_CHECKPOINT)
    channels = r.u32("channels")
    d = r.u32("D")
    if channels < 1 or d < 1:
        raise FormatError("dim overflow: channels and D must be >= 1", 8)
    weights = np.frombuffer(r.take(channels * d * 8, "weights"), dtype="<f8").reshape(channels, d)
    bias = np.frombuffer(r.take(channels * 8, "bias"), dtype="<f8")
    r.expect_end()
    return SegHead(weights=weights, bias=bias)


# -- debiased centroid set (JSON) ----------------------------------------------

def write_centroid_set(path, cset) -> None:
    payload = {
        "alpha": cset.alpha,
        "classes": {
            str(class_id): {
                "vector": [float(v) for v in cset.per_class[class_id]],
                "selected_count": int(cset.selected_counts[class_id]),
            }
            for class_id in sorted(cset.per_class)
        },
    }
    text = json.dumps(payload, sort_keys=True, indent=2) + "\n"
    atomic_write_bytes(path, text.encode("utf-8"))


def read_centroid_set(path):
    from .selection import DebiasedCentroidSet

    payload = json.loads(Path(path).read_text())
    per_class = {}
    counts = {}
    for key, entry in payload["classes"].items():
        per_class[int(key)] = np.asarray(entry["vector"], dtype=np.float64)
        counts[int(key)] = int(entry["selected_count"])
    return DebiasedCentroidSet(
        per_class=per_class, alpha=float(payload["alpha"]), selected_counts=counts
    )


# -- manifest -------------------------------------------------------------------

def _relpath(path: Optional[Path], base: Path) -> Optional[str]:
    if path is None:
        return None
    return os.path.relpath(Path(path), base)


def write_manifest(path, manifest: DatasetManifest) -> None:
    path = Path(path)
    base = path.parent
    lines = [
        json.dumps(
            {"embedding_dim": manifest.embedding_dim, "num_classes": manifest.num_classes},
            sort_keys=True,
        )
    ]
    for r in manifest.records:
        entry = {
            "image_id": r.image_id,
            "feature_path": _relpath(r.feature_path, base),
            "label_path": _relpath(r.label_path, base),
            "truth_classes": sorted(r.truth_classes),
        }
        if r.gt_path is not None:
            entry["gt_path"] = _relpath(r.gt_path, base)
        if r.bias_path is not None:
            entry["bias_path"] = _relpath(r.bias_path, base)
        lines.append(json.dumps(entry, sort_keys=True))
    atomic_write_bytes(path, ("\n".join(lines) + "\n").encode("utf-8"))


def read_manifest(path) -> DatasetManifest:
    path = Path(path)
    base = path.parent
    lines = [ln for ln in path.read_text().splitlines() if ln.strip()]
    if not lines:
        raise ValueError(f"{path}: empty manifest")
    meta = json.loads(lines[0])
    if "embedding_dim" not in meta or "num_classes" not in meta:
        raise ValueError(f"{path}: first manifest line must carry embedding_dim/num_classes")
    records = []
    for ln in lines[1:]:
        entry = json.loads(ln)
        records.append(
            ImageRecord(
                image_id=entry["image_id"],
                feature_path=base / entry["feature_path"],
                label_path=base / entry["label_path"],
                truth_classes=frozenset(entry["truth_classes"]),
                gt_path=(base / entry["gt_path"]) if entry.get("gt_path") else None,
                bias_path=(base / entry["bias_path"]) if entry.get("bias_path") else None,
            )
        )
    return DatasetManifest(
        records=tuple(records),
        num_classes=int(meta["num_classes"]),
        embedding_dim=int(meta["embedding_dim"]),
    )


# -- bulk loaders -----------------------------------------------------------------

def load_features(manifest: DatasetManifest) -> dict[str, FeatureMap]:
    return {r.image_id: read_feature_map(r.feature_path) for r in manifest.records}


def load_pseudo_labels(manifest: DatasetManifest) -> dict[str, LabelMap]:
    return {
        r.image_id: read_label_map(r.label_path, manifest.num_classes)
        for r in manifest.records
    }


def load_ground_truth(manifest: DatasetManifest) -> dict[str, LabelMap]:
    return {
        r.image_id: read_label_map(r.gt_path, manifest.num_classes)
        for r in manifest.records
        if r.gt_path is not None
    }


def load_bias_masks(manifest: DatasetManifest) -> dict[str, np.ndarray]:
    out = {}
    for r in manifest.records:
        if r.bias_path is not None:
            out[r.image_id] = read_label_map(r.bias_path, 1).data.astype(bool)
    return out
