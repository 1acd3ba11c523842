import json

import numpy as np
import pytest
from numpy.testing import assert_array_equal

from src.utils.dataset_io import (
    DatasetRecord, decode_record, encode_record, load_dataset, read_manifest, read_pgm, read_record,
    record_filename, silhouette_overlay, write_manifest, write_pgm, write_record,
)
from src.utils.errors import FormatError


@pytest.fixture
def record():
    rng = np.random.default_rng(0)
    return DatasetRecord(
        n_rows=3, n_cols=3, tier="fold", seed=42,
        positions=rng.normal(size=(9, 3)).astype("<f4"),
        flags=np.array([1, 0, 1, 1, 1, 0, 1, 1, 1], dtype=bool),
        image=rng.uniform(size=(4, 4)).astype("<f4"),
        keypoints=np.array([0, 2, 6, 8, 1, 3, 5, 7, 4], dtype="<u4"),
    )


def test_record_file_keeps_every_field(record, tmp_path):
    path = tmp_path / record_filename(record.tier, record.seed)
    write_record(str(path), record)
    loaded = read_record(str(path))
    assert (loaded.n_rows, loaded.n_cols, loaded.tier, loaded.seed) == (3, 3, "fold", 42)
    assert_array_equal(loaded.positions, record.positions)
    assert_array_equal(loaded.flags, record.flags)
    assert_array_equal(loaded.image, record.image)
    assert_array_equal(loaded.keypoints, record.keypoints)
    sample = loaded.to_sample()
    assert sample.positions.dtype == np.float64 and sample.tier == "fold"


def test_record_size(record):
    header = 8 + 4 + 2 * 4 + 1 + 8
    assert len(encode_record(record)) == header + 9 * 12 + 9 + 16 * 4 + 36


def test_filename_is_zero_padded():
    assert record_filename("drag", 7) == "drag_0000000007.rec"


def test_decoding_rejects_damaged_records(record):
    blob = encode_record(record)
    with pytest.raises(FormatError):
        decode_record(blob[:-1])
    with pytest.raises(FormatError):
        decode_record(blob[:10])
    with pytest.raises(FormatError):
        decode_record(b"XXXXXXXX" + blob[8:])
    bad_tier = bytearray(blob)
    bad_tier[8 + 4 + 8] = 9
    with pytest.raises(FormatError):
        decode_record(bytes(bad_tier))


def test_encoding_rejects_inconsistent_records(record):
    with pytest.raises(FormatError):
        encode_record(DatasetRecord(**{**record.__dict__, "tier": "flat"}))
    with pytest.raises(FormatError):
        encode_record(DatasetRecord(**{**record.__dict__, "n_rows": 4}))
    with pytest.raises(FormatError):
        encode_record(DatasetRecord(**{**record.__dict__, "keypoints": record.keypoints[:4]}))


def test_dataset_follows_manifest_order(record, tmp_path):
    entries = []
    for seed in (5, 1):
        name = record_filename("drag", seed)
        write_record(str(tmp_path / name), DatasetRecord(**{**record.__dict__, "tier": "drag", "seed": seed}))
        entries.append({"file": name, "tier": "drag", "seed": seed, "history": []})
    write_manifest(str(tmp_path), entries, {"config": {"mesh.rows": "3"}})
    assert [r.seed for r in load_dataset(str(tmp_path))] == [5, 1]
    assert read_manifest(str(tmp_path))["config"] == {"mesh.rows": "3"}


def test_manifest_errors(tmp_path):
    with pytest.raises(FormatError):
        read_manifest(str(tmp_path))
    (tmp_path / "manifest.json").write_text(json.dumps({"version": 1, "count": 2, "records": []}))
    with pytest.raises(FormatError):
        read_manifest(str(tmp_path))


def test_graymap(tmp_path):
    image = np.zeros((3, 5))
    image[1, 2] = 0.125
    image[0, 0] = 2.0
    path = str(tmp_path / "img.pgm")
    write_pgm(path, image)
    with open(path, "rb") as fh:
        assert fh.read(11) == b"P5\n5 3\n255\n"
    pixels = read_pgm(path)
    assert pixels.shape == (3, 5)
    assert pixels[1, 2] == 32 and pixels[0, 0] == 255
    (tmp_path / "bad.pgm").write_bytes(b"P2\n1 1\n255\n0")
    with pytest.raises(FormatError):
        read_pgm(str(tmp_path / "bad.pgm"))


def test_overlay_levels():
    predicted = np.array([[1, 1], [0, 0]])
    observed = np.array([[1, 0], [1, 0]])
    assert_array_equal(silhouette_overlay(predicted, observed), [[255, 85], [170, 0]])
