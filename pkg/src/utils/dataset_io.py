"""
On-disk formats: one binary record per generated sample, a JSON manifest
per dataset directory, and portable graymap overlays.
"""
import json
import os
import re
import struct
from dataclasses import dataclass

import numpy as np

from src.utils.errors import FormatError
from src.utils.logger import logger
from src.utils.training import Sample

DATA_MAGIC = b"TRTMDATA"
DATA_VERSION = 1
TIER_TAGS = {"drag": 0, "fold": 1, "drop": 2, "reconstructed": 3}
TAG_TIERS = {v: k for k, v in TIER_TAGS.items()}
_HEADER = "<8sIHHHHBQ"
MANIFEST_NAME = "manifest.json"


@dataclass(frozen=True, eq=False)
class DatasetRecord:
    """
    One sample: grid and image sizes, tier, seed, centered vertex positions
    (meters), visibility flags, normalized depth image and keypoint indices.
    """
    n_rows: int
    n_cols: int
    tier: str
    seed: int
    positions: np.ndarray
    flags: np.ndarray
    image: np.ndarray
    keypoints: np.ndarray

    def to_sample(self):
        return Sample(image=self.image.astype(np.float64), positions=self.positions.astype(np.float64),
                      flags=self.flags.astype(bool), tier=self.tier, seed=self.seed)


def record_filename(tier, seed):
    return f"{tier}_{seed:010d}.rec"


def encode_record(record):
    """Little-endian bytes of a record, laid out exactly as the header fields list them."""
    n_vertices = record.n_rows * record.n_cols
    h, w = record.image.shape
    if record.positions.shape != (n_vertices, 3) or record.flags.shape != (n_vertices,):
        raise FormatError(f"record arrays do not match a {record.n_rows}x{record.n_cols} grid")
    if record.keypoints.shape != (9,):
        raise FormatError(f"records carry 9 keypoints, got {record.keypoints.shape}")
    if record.tier not in TIER_TAGS:
        raise FormatError(f"unknown tier {record.tier!r}")
    parts = [
        struct.pack(_HEADER, DATA_MAGIC, DATA_VERSION, record.n_rows, record.n_cols, h, w,
                    TIER_TAGS[record.tier], record.seed),
        np.ascontiguousarray(record.positions, dtype="<f4").tobytes(),
        np.ascontiguousarray(record.flags, dtype=np.uint8).tobytes(),
        np.ascontiguousarray(record.image, dtype="<f4").tobytes(),
        np.ascontiguousarray(record.keypoints, dtype="<u4").tobytes(),
    ]
    return b"".join(parts)


def decode_record(blob, source="<bytes>"):
    header_size = struct.calcsize(_HEADER)
    if len(blob) < header_size:
        raise FormatError(f"{source}: truncated record header")
    magic, version, n_rows, n_cols, h, w, tag, seed = struct.unpack_from(_HEADER, blob, 0)
    if magic != DATA_MAGIC:
        raise FormatError(f"{source}: not a dataset record (bad magic)")
    if version != DATA_VERSION:
        raise FormatError(f"{source}: unsupported record version {version}")
    if tag not in TAG_TIERS:
        raise FormatError(f"{source}: unknown tier tag {tag}")
    n = n_rows * n_cols
    sizes = (12 * n, n, 4 * h * w, 36)
    if len(blob) != header_size + sum(sizes):
        raise FormatError(f"{source}: record holds {len(blob)} bytes, expected {header_size + sum(sizes)}")
    offset = header_size
    positions = np.frombuffer(blob, dtype="<f4", count=3 * n, offset=offset).reshape(n, 3)
    offset += sizes[0]
    flags = np.frombuffer(blob, dtype=np.uint8, count=n, offset=offset)
    offset += sizes[1]
    image = np.frombuffer(blob, dtype="<f4", count=h * w, offset=offset).reshape(h, w)
    offset += sizes[2]
    keypoints = np.frombuffer(blob, dtype="<u4", count=9, offset=offset)
    return DatasetRecord(n_rows=n_rows, n_cols=n_cols, tier=TAG_TIERS[tag], seed=seed,
                         positions=positions.copy(), flags=flags.astype(bool), image=image.copy(),
                         keypoints=keypoints.copy())


def write_record(path, record):
    with open(path, "wb") as fh:
        fh.write(encode_record(record))


def read_record(path):
    with open(path, "rb") as fh:
        return decode_record(fh.read(), path)


def write_manifest(directory, entries, extra=None):
    """
    Args:
        directory (str): Dataset directory
        entries (list): One dict per record: file, tier, seed and the generating action history
        extra (dict): Additional top-level fields (e.g. the resolved configuration)
    """
    manifest = {"version": DATA_VERSION, "count": len(entries), "records": entries}
    if extra:
        manifest.update(extra)
    path = os.path.join(directory, MANIFEST_NAME)
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return path


def read_manifest(directory):
    path = os.path.join(directory, MANIFEST_NAME)
    if not os.path.exists(path):
        raise FormatError(f"{directory}: no {MANIFEST_NAME}")
    with open(path) as fh:
        manifest = json.load(fh)
    if manifest.get("count") != len(manifest.get("records", [])):
        raise FormatError(f"{path}: manifest count {manifest.get('count')} does not match its record list")
    return manifest


def load_dataset(directory):
    """All records listed by a directory's manifest, in manifest order."""
    manifest = read_manifest(directory)
    records = []
    for entry in manifest["records"]:
        records.append(read_record(os.path.join(directory, entry["file"])))
    logger.info(f"Loaded {len(records)} records from {directory}")
    return records


def write_pgm(path, image):
    """Binary (P5) 8-bit graymap; float images are scaled from [0, 1]."""
    image = np.asarray(image)
    if image.dtype != np.uint8:
        image = np.clip(np.round(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    h, w = image.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(image).tobytes())


def read_pgm(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    header = re.match(rb"P5\s+(\d+)\s+(\d+)\s+255\s", blob)
    if header is None:
        raise FormatError(f"{path}: not an 8-bit binary graymap")
    w, h = int(header.group(1)), int(header.group(2))
    data = np.frombuffer(blob, dtype=np.uint8, offset=header.end())
    if data.size != w * h:
        raise FormatError(f"{path}: expected {w * h} pixels, got {data.size}")
    return data.reshape(h, w)


def silhouette_overlay(predicted, observed):
    """Gray levels: 255 both, 170 observed only, 85 predicted only, 0 neither."""
    p = np.asarray(predicted) > 0.5
    o = np.asarray(observed) > 0.5
    out = np.zeros(p.shape, dtype=np.uint8)
    out[p & o] = 255
    out[o & ~p] = 170
    out[p & ~o] = 85
    return out
