import os

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from PIL import Image

from rgbdvos.core import (BinaryMask, BoundingBox, MixedPrompt, PromptPoint, RGBDFrame,
                          SequenceDataset, anchor_point, labels_to_masks, load_sequence,
                          mask_area, mask_bbox, mask_centroid, masks_to_labels,
                          read_label_png, save_sequence, write_depth_png, write_label_png)
from rgbdvos.errors import AnnotationError, EmptyMaskError, IngestError, ShapeError


def write_seq(root, n=3, h=16, w=20, labels=2, depth_value=None):
    os.makedirs(os.path.join(root, "rgb"))
    os.makedirs(os.path.join(root, "depth"))
    os.makedirs(os.path.join(root, "masks"))
    rng = np.random.default_rng(0)
    for i in range(n):
        Image.fromarray(rng.integers(0, 255, (h, w, 3), dtype=np.uint8)).save(
            os.path.join(root, "rgb", f"{i:05d}.png"))
        d = np.full((h, w), depth_value, np.uint16) if depth_value else \
            rng.integers(1, 5000, (h, w)).astype(np.uint16)
        write_depth_png(os.path.join(root, "depth", f"{i:05d}.png"), d)
    ann = np.zeros((h, w), np.uint8)
    for k in range(1, labels + 1):
        ann[2 * k:2 * k + 2, 3:6] = k
    write_label_png(os.path.join(root, "masks", "00000.png"), ann)
    return ann


def test_load_sequence_counts(tmp_path):
    write_seq(str(tmp_path / "s"))
    ds = load_sequence(str(tmp_path / "s"))
    assert len(ds) == 3
    assert ds.object_count == 2
    assert [f.index for f in ds.frames] == [0, 1, 2]


def test_missing_depth_reports_frame(tmp_path):
    root = str(tmp_path / "s")
    write_seq(root)
    os.remove(os.path.join(root, "depth", "00001.png"))
    with pytest.raises(IngestError) as exc:
        load_sequence(root)
    assert exc.value.frame_index == 1


def test_constant_depth_decodes_as_millimetres(tmp_path):
    root = str(tmp_path / "s")
    write_seq(root, depth_value=1000)
    ds = load_sequence(root)
    for f in ds.frames:
        assert f.depth.dtype == np.uint16
        assert np.all(f.depth == 1000)


def test_mismatched_resolution(tmp_path):
    root = str(tmp_path / "s")
    write_seq(root)
    write_depth_png(os.path.join(root, "depth", "00002.png"), np.ones((8, 8), np.uint16))
    with pytest.raises(ShapeError):
        load_sequence(root)


def test_missing_annotation(tmp_path):
    root = str(tmp_path / "s")
    write_seq(root)
    os.remove(os.path.join(root, "masks", "00000.png"))
    with pytest.raises(AnnotationError):
        load_sequence(root)


def test_load_is_deterministic(tmp_path):
    root = str(tmp_path / "s")
    write_seq(root)
    a, b = load_sequence(root), load_sequence(root)
    for fa, fb in zip(a.frames, b.frames):
        assert fa.rgb.tobytes() == fb.rgb.tobytes()
        assert fa.depth.tobytes() == fb.depth.tobytes()
    assert a.first_frame_annotation.tobytes() == b.first_frame_annotation.tobytes()


def test_save_load_roundtrip(tmp_path, squares):
    save_sequence(squares, str(tmp_path / "q"))
    back = load_sequence(str(tmp_path / "q"))
    assert back.object_count == squares.object_count
    for a, b in zip(squares.frames, back.frames):
        np.testing.assert_array_equal(a.rgb, b.rgb)
        np.testing.assert_array_equal(a.depth, b.depth)
        np.testing.assert_array_equal(a.gt_mask, b.gt_mask)


def test_label_png_roundtrip(tmp_path, rng):
    labels = rng.integers(0, 4, (13, 17)).astype(np.uint8)
    write_label_png(str(tmp_path / "m.png"), labels)
    np.testing.assert_array_equal(read_label_png(str(tmp_path / "m.png")), labels)


def test_frame_invariants():
    with pytest.raises(ShapeError):
        RGBDFrame(0, np.zeros((4, 4, 3)), np.zeros((4, 5)))
    with pytest.raises(ValueError):
        SequenceDataset([RGBDFrame(1, np.zeros((2, 2, 3)), np.zeros((2, 2))),
                         RGBDFrame(1, np.zeros((2, 2, 3)), np.zeros((2, 2)))],
                        np.ones((2, 2)), 1)


def pixels_mask(coords, shape=(12, 12)):
    m = np.zeros(shape, bool)
    for x, y in coords:
        m[y, x] = True
    return m


def test_centroid_single_pixel():
    assert mask_centroid(pixels_mask([(5, 7)])) == (5.0, 7.0)


def test_centroid_square():
    m = np.zeros((8, 8), bool)
    m[0:4, 0:4] = True
    assert mask_centroid(m) == (1.5, 1.5)


def test_centroid_l_shape_brute_force():
    pts = [(2, 2), (2, 3), (2, 4), (2, 5), (3, 5), (4, 5)]
    expected = (sum(p[0] for p in pts) / 6, sum(p[1] for p in pts) / 6)
    assert mask_centroid(pixels_mask(pts)) == pytest.approx(expected, abs=1e-12)


def test_centroid_uses_largest_component():
    m = pixels_mask([(0, 0)] + [(8, y) for y in range(5, 9)])
    assert mask_centroid(m) == (8.0, 6.5)
    assert mask_centroid(m, mode="all") == pytest.approx((6.4, 5.2))


def test_empty_mask_errors():
    empty = np.zeros((4, 4), bool)
    with pytest.raises(EmptyMaskError):
        mask_centroid(empty)
    with pytest.raises(EmptyMaskError):
        mask_bbox(empty)
    assert mask_area(empty) == 0


def test_bbox_examples(rng):
    assert mask_bbox(pixels_mask([(5, 7)])) == BoundingBox(5, 7, 5, 7)
    assert mask_bbox(pixels_mask([(0, 0), (9, 3)])) == BoundingBox(0, 0, 9, 3)
    pts = [(int(x), int(y)) for x, y in rng.integers(0, 12, (20, 2))]
    xs, ys = [p[0] for p in pts], [p[1] for p in pts]
    assert mask_bbox(pixels_mask(pts)) == BoundingBox(min(xs), min(ys), max(xs), max(ys))


def test_area_examples():
    assert mask_area(np.ones((5, 7), bool)) == 35
    checker = (np.add.outer(np.arange(4), np.arange(4)) % 2).astype(bool)
    assert mask_area(checker) == sum(1 for v in checker.ravel() if v) == 8


@settings(max_examples=60, deadline=None)
@given(arrays(bool, st.tuples(st.integers(1, 12), st.integers(1, 12))))
def test_geometry_properties(m):
    assert 0 <= mask_area(m) <= m.size
    if m.any():
        cx, cy = mask_centroid(m)
        assert mask_bbox(m).contains(cx, cy)
        p = anchor_point(m)
        assert m[p.y, p.x]


def test_label_mask_conversion():
    labels = np.array([[0, 1, 2], [2, 2, 0]], np.uint8)
    masks = labels_to_masks(labels)
    assert [m.object_id for m in masks] == [1, 2]
    np.testing.assert_array_equal(masks_to_labels(masks), labels)


def test_prompt_invariants():
    box = BoundingBox(0, 0, 3, 3)
    with pytest.raises(ValueError):
        MixedPrompt(box, ())
    with pytest.raises(ValueError):
        MixedPrompt(BoundingBox(3, 3, 2, 2), (PromptPoint(1, 1),))
    p = MixedPrompt(box, (PromptPoint(1, 2),)).translate(5, -1)
    assert p.box == BoundingBox(5, -1, 8, 2) and p.points[0][:2] == (6, 1)


def test_binary_mask_validation():
    with pytest.raises(ValueError):
        BinaryMask(np.zeros((2, 2)), 0)
    assert not BinaryMask(np.zeros((3, 3)))
