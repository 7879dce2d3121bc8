import struct

import numpy as np
import pytest

from csta.dataio import (BLOB_MAGIC, Dataset, DatasetError, VideoRecord, converter_notes, gen_synthetic,
                         load_dataset, save_dataset)
from csta.shots import kts_segment


def test_round_trip(tmp_path):
    ds = gen_synthetic(3, t_range=(10, 14), dim=8, seed=1)
    save_dataset(ds, tmp_path / "d")
    back = load_dataset(tmp_path / "d")
    assert back.name == ds.name and back.dim == ds.dim
    assert back.videos == ds.videos


def test_round_trip_summaries_and_no_change_points(tmp_path):
    ds = gen_synthetic(2, t_range=(20, 20), dim=4, kind="summaries", seed=2)
    ds.videos[1].change_points = None
    ds.videos[1].importance = None
    save_dataset(ds, tmp_path / "d")
    assert load_dataset(tmp_path / "d").videos == ds.videos


def test_blob_layout(tmp_path):
    v = VideoRecord("a", np.arange(6, dtype=np.float32).reshape(3, 2), np.array([[0.0, 0.5, 1.0]]))
    save_dataset(Dataset("x", 2, [v]), tmp_path)
    raw = (tmp_path / "a.bin").read_bytes()
    assert struct.unpack_from("<4I", raw) == (BLOB_MAGIC, 1, 3, 2)
    assert raw[:4] == b"CSTA"
    np.testing.assert_array_equal(np.frombuffer(raw[16:], "<f4"), [0, 1, 2, 3, 4, 5, 0, 0.5, 1])


def test_short_blob_names_the_record(tmp_path):
    ds = gen_synthetic(2, t_range=(10, 10), dim=4, seed=3)
    ds.videos[0].importance = None
    save_dataset(ds, tmp_path)
    v = ds.videos[0]
    blob = (struct.pack("<4I", BLOB_MAGIC, 1, 10, 4) + v.features[:9].astype("<f4").tobytes()
            + v.annotations.astype("<f4").tobytes())
    (tmp_path / f"{v.id}.bin").write_bytes(blob)
    with pytest.raises(DatasetError, match=v.id) as exc:
        load_dataset(tmp_path)
    assert "9 feature rows" in str(exc.value)


def test_mixed_dims_rejected(tmp_path):
    a = VideoRecord("a", np.zeros((3, 4)), np.zeros((1, 3)))
    b = VideoRecord("b", np.zeros((3, 5)), np.zeros((1, 3)))
    with pytest.raises(DatasetError, match="'b'"):
        save_dataset(Dataset("x", 4, [a, b]), tmp_path)


@pytest.mark.parametrize("record,match", [
    (VideoRecord("v", np.zeros((3, 2)), np.zeros((1, 4))), "annotations"),
    (VideoRecord("v", np.zeros((3, 2)), np.full((1, 3), 1.5)), r"\[0, 1\]"),
    (VideoRecord("v", np.zeros((3, 2)), np.full((1, 3), 0.5), "summaries"), "binary"),
    (VideoRecord("v", np.zeros((3, 2)), np.zeros((1, 3)), change_points=(3,)), "change_points"),
    (VideoRecord("v", np.full((3, 2), np.nan), np.zeros((1, 3))), "non-finite"),
    (VideoRecord("v", np.zeros((3, 2)), np.zeros((1, 3)), "ratings"), "annotation_kind"),
])
def test_record_invariants(record, match):
    with pytest.raises(DatasetError, match=match):
        record.validate()


def test_duplicate_ids_rejected():
    v = VideoRecord("v", np.zeros((3, 2)), np.zeros((1, 3)))
    with pytest.raises(DatasetError, match="duplicate"):
        Dataset("x", 2, [v, v]).validate()


def test_manifest_errors(tmp_path):
    with pytest.raises(DatasetError, match="manifest"):
        load_dataset(tmp_path)
    save_dataset(gen_synthetic(1, t_range=(5, 5), dim=2), tmp_path)
    text = (tmp_path / "manifest.txt").read_text()
    (tmp_path / "manifest.txt").write_text(text.replace("version = 1", "version = 2").replace("version=1", "version=2"))
    with pytest.raises(DatasetError, match="version"):
        load_dataset(tmp_path)


def test_bad_blob_magic(tmp_path):
    ds = gen_synthetic(1, t_range=(5, 5), dim=2)
    save_dataset(ds, tmp_path)
    path = tmp_path / f"{ds.videos[0].id}.bin"
    raw = bytearray(path.read_bytes())
    raw[:4] = b"XXXX"
    path.write_bytes(bytes(raw))
    with pytest.raises(DatasetError, match="magic"):
        load_dataset(tmp_path)


def test_noiseless_single_annotator_equals_importance():
    ds = gen_synthetic(3, noise=0.0, n_annotators=1, seed=4)
    for v in ds:
        np.testing.assert_array_equal(v.annotations[0], v.importance)
        np.testing.assert_array_equal(v.target, v.importance)


def test_generator_deterministic():
    assert gen_synthetic(seed=5).videos == gen_synthetic(seed=5).videos
    assert gen_synthetic(seed=5).videos != gen_synthetic(seed=6).videos


def test_change_points_recovered_by_kts():
    ds = gen_synthetic(4, noise=0.0, n_segments=5, seed=7)
    for v in ds:
        assert kts_segment(v.features, len(v.change_points)).change_points == v.change_points


def test_summary_annotations_are_binary_within_budget():
    ds = gen_synthetic(3, kind="summaries", seed=8)
    for v in ds:
        v.validate()
        assert np.all(v.annotations.sum(axis=1) <= np.floor(0.15 * v.n_frames))


def test_linear_probe_reads_importance():
    ds = gen_synthetic(8, noise=0.1, seed=0)
    x = np.vstack([v.features for v in ds]).astype(np.float64)
    y = np.concatenate([v.importance for v in ds])
    design = np.hstack([x, np.ones((len(x), 1))])
    coef, *_ = np.linalg.lstsq(design, y, rcond=None)
    assert np.corrcoef(design @ coef, y)[0, 1] > 0.9


def test_generator_argument_checks():
    with pytest.raises(ValueError):
        gen_synthetic(0)
    with pytest.raises(ValueError):
        gen_synthetic(noise=-1)
    with pytest.raises(ValueError):
        gen_synthetic(kind="ratings")


def test_converter_notes_mention_mapping():
    notes = converter_notes()
    assert "2 fps" in notes and "save_dataset" in notes
