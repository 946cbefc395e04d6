import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from resvmamba.data import (
    DatasetError,
    DatasetIndex,
    Record,
    image_size_stats,
    load_images,
    load_split_file,
    nearest_centroid_accuracy,
    normalized_entropy,
    scan_image_directory,
    stratified_split,
    synth_images,
)


def make_tree(root, layout, size=(8, 6)):
    for cls, n in layout.items():
        d = root / cls
        d.mkdir(parents=True)
        for i in range(n):
            Image.new("RGB", size, (i, 0, 0)).save(d / f"{i:03d}.png")
    return root


def test_scan_is_sorted_and_skips_junk(tmp_path):
    make_tree(tmp_path, {"b": 2, "a": 3})
    (tmp_path / "a" / "notes.txt").write_text("x")
    (tmp_path / "a" / "broken.png").write_bytes(b"not a png")
    idx = scan_image_directory(tmp_path)
    assert idx.class_names == ["a", "b"]
    assert [r.path for r in idx.records] == sorted(r.path for r in idx.records)
    assert idx.counts() == [3, 2]
    assert [p for p, _ in idx.skipped] == ["a/broken.png"]


def test_scan_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        scan_image_directory(tmp_path / "missing")
    with pytest.raises(DatasetError):
        scan_image_directory(tmp_path)


def records(sizes):
    recs = [Record(f"c{c}/{i:03d}.png", c) for c, n in enumerate(sizes) for i in range(n)]
    return DatasetIndex(None, [f"c{c}" for c in range(len(sizes))], recs)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(1, 60), min_size=1, max_size=8), st.integers(0, 1000))
def test_split_ratio_within_one_image(sizes, seed):
    out = stratified_split(records(sizes), 0.7, seed)
    for c, n in enumerate(sizes):
        tr = out.counts("train")[c]
        assert abs(tr - 0.7 * n) <= 1 or n < 2
        assert tr + out.counts("val")[c] == n


def test_singleton_class_goes_to_train():
    out = stratified_split(records([1, 4]), 0.7, 0)
    assert out.counts("train")[0] == 1 and out.counts("val")[0] == 0


def test_split_bytes_reproducible(tmp_path):
    idx = records([10, 7, 3])
    stratified_split(idx, 0.7, 5, out=tmp_path / "a.tsv")
    stratified_split(idx, 0.7, 5, out=tmp_path / "b.tsv")
    assert (tmp_path / "a.tsv").read_bytes() == (tmp_path / "b.tsv").read_bytes()
    stratified_split(idx, 0.7, 6, out=tmp_path / "c.tsv")
    assert (tmp_path / "a.tsv").read_bytes() != (tmp_path / "c.tsv").read_bytes()


def test_split_rejects_bad_ratio():
    with pytest.raises(ValueError):
        stratified_split(records([4]), 1.0)


def test_split_file_round_trip(tmp_path):
    make_tree(tmp_path / "d", {"x": 4, "y": 3})
    idx = stratified_split(scan_image_directory(tmp_path / "d"), 0.7, 1, out=tmp_path / "s.tsv")
    back = load_split_file(tmp_path / "d", tmp_path / "s.tsv")
    assert back.split_lines() == idx.split_lines()
    line = (tmp_path / "s.tsv").read_text().splitlines()[0]
    assert line.split("\t")[1] in ("train", "val")


def test_split_file_errors(tmp_path):
    make_tree(tmp_path / "d", {"x": 1})
    (tmp_path / "s.tsv").write_text("x/000.png\tholdout\n")
    with pytest.raises(DatasetError, match="unknown split"):
        load_split_file(tmp_path / "d", tmp_path / "s.tsv")
    (tmp_path / "s.tsv").write_text("x/999.png\ttrain\n")
    with pytest.raises(FileNotFoundError):
        load_split_file(tmp_path / "d", tmp_path / "s.tsv")


def test_entropy_examples():
    assert normalized_entropy([7, 7, 7]) == 1.0
    assert normalized_entropy([1, 1, 2]) == pytest.approx(0.946395, abs=1e-6)
    assert normalized_entropy([1000, 1]) < 0.1
    with pytest.raises(ValueError):
        normalized_entropy([5])
    with pytest.raises(ValueError):
        normalized_entropy([3, 0])


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(1, 10**6), min_size=2, max_size=300))
def test_entropy_in_unit_interval(counts):
    assert 0.0 <= normalized_entropy(counts) <= 1.0


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 500), st.integers(1, 10**5))
def test_balanced_entropy_exactly_one(n, c):
    assert normalized_entropy([c] * n) == 1.0


def test_size_stats_constant_and_mixed(tmp_path):
    make_tree(tmp_path / "c", {"a": 3}, size=(600, 600))
    s = image_size_stats(scan_image_directory(tmp_path / "c"))
    assert s.mean_std() == "600±0.00×600±0.00"
    d = tmp_path / "m" / "a"
    d.mkdir(parents=True)
    Image.new("RGB", (10, 20)).save(d / "1.png")
    Image.new("RGB", (30, 40)).save(d / "2.png")
    s = image_size_stats(scan_image_directory(tmp_path / "m"))
    assert (s.max_h, s.min_h, s.max_w, s.min_w) == (40, 20, 30, 10)
    assert s.mean_std() == "30±10.00×20±10.00"


def test_load_images_resizes(tmp_path):
    make_tree(tmp_path, {"a": 2}, size=(8, 6))
    idx = scan_image_directory(tmp_path)
    x, y = load_images(idx, "train", (4, 4))
    assert x.shape == (2, 3, 4, 4) and x.dtype == np.uint8 and list(y) == [0, 0]


def test_synth_is_deterministic_and_learnable_but_not_trivial():
    a, la = synth_images(4, 32, 32, seed=0)
    b, _ = synth_images(4, 32, 32, seed=0)
    np.testing.assert_array_equal(a, b)
    acc = nearest_centroid_accuracy(a, la)
    assert 0.4 < acc < 1.0
