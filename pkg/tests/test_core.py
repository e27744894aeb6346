import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from duodet.core import (
    BoundingBox,
    DatasetManifest,
    Detection,
    ManifestError,
    ManifestRecord,
    box_convert,
    clip_box,
    iou,
    load_detections,
    load_manifest,
    save_detections,
    save_manifest,
    validate_sample,
)

from conftest import make_sample


def box(x0, y0, x1, y1, cid=0, score=None):
    return BoundingBox(x0, y0, x1, y1, cid, score)


valid_boxes = st.builds(
    lambda x0, y0, w, h: box(x0, y0, x0 + w, y0 + h),
    st.floats(-50, 550, allow_nan=False),
    st.floats(-50, 550, allow_nan=False),
    st.floats(0.5, 300),
    st.floats(0.5, 300),
)


class TestIou:
    def test_identical(self):
        assert iou(box(0, 0, 10, 10), box(0, 0, 10, 10)) == 1.0

    def test_disjoint(self):
        assert iou(box(0, 0, 10, 10), box(20, 20, 30, 30)) == 0.0

    def test_partial_overlap(self):
        # areas 100/100, intersection 50, union 150
        assert iou(box(0, 0, 10, 10), box(5, 0, 15, 10)) == pytest.approx(1 / 3)

    @given(valid_boxes, valid_boxes)
    @settings(max_examples=200)
    def test_symmetric(self, a, b):
        assert iou(a, b) == iou(b, a)

    @given(valid_boxes)
    @settings(max_examples=100)
    def test_self_iou_is_one(self, a):
        assert iou(a, a) == pytest.approx(1.0)

    def test_matches_pixel_count_oracle(self):
        # integer boxes rasterize exactly: pixel (i, j) covers [j, j+1) x [i, i+1)
        rng = np.random.Generator(np.random.PCG64(3))
        grid = 64
        checked = 0
        while checked < 1000:
            x = np.sort(rng.integers(0, grid, size=2))
            y = np.sort(rng.integers(0, grid, size=2))
            u = np.sort(rng.integers(0, grid, size=2))
            v = np.sort(rng.integers(0, grid, size=2))
            if x[0] == x[1] or y[0] == y[1] or u[0] == u[1] or v[0] == v[1]:
                continue
            checked += 1
            a = box(x[0], y[0], x[1], y[1])
            b = box(u[0], v[0], u[1], v[1])
            ma = np.zeros((grid, grid), dtype=bool)
            mb = np.zeros((grid, grid), dtype=bool)
            ma[y[0] : y[1], x[0] : x[1]] = True
            mb[v[0] : v[1], u[0] : u[1]] = True
            inter = np.logical_and(ma, mb).sum()
            union = np.logical_or(ma, mb).sum()
            oracle = inter / union
            assert iou(a, b) == pytest.approx(oracle, abs=0.02)


class TestClipBox:
    def test_quadrant_clip(self):
        out = clip_box(box(-5, -5, 5, 5), 100, 100, min_area_frac=0.0)
        assert (out.x_min, out.y_min, out.x_max, out.y_max) == (0, 0, 5, 5)

    def test_fully_inside_unchanged(self):
        b = box(10, 10, 20, 20)
        out = clip_box(b, 100, 100, min_area_frac=0.25)
        assert out == b

    def test_dropped_below_area_fraction(self):
        # clipped area 25 of 100 < 0.5
        assert clip_box(box(95, 95, 105, 105), 100, 100, min_area_frac=0.5) is None

    def test_kept_at_exact_fraction(self):
        assert clip_box(box(95, 95, 105, 105), 100, 100, min_area_frac=0.25) is not None

    def test_fully_outside(self):
        assert clip_box(box(200, 200, 210, 210), 100, 100, min_area_frac=0.0) is None

    def test_invalid_frame(self):
        with pytest.raises(ValueError):
            clip_box(box(0, 0, 1, 1), 0, 100)


class TestBoxConvert:
    def test_corner_to_center(self):
        assert box_convert(box(0, 0, 10, 10), "corner_to_center") == (5, 5, 10, 10)

    def test_center_to_corner(self):
        assert box_convert((5, 5, 10, 10), "center_to_corner") == (0, 0, 10, 10)

    def test_round_trip_exact_small_ints(self):
        b = box(3, 4, 7, 9)
        cx, cy, w, h = box_convert(b, "corner_to_center")
        assert box_convert((cx, cy, w, h), "center_to_corner") == (3, 4, 7, 9)

    @given(valid_boxes)
    @settings(max_examples=200)
    def test_round_trip_within_precision(self, b):
        cx, cy, w, h = box_convert(b, "corner_to_center")
        x0, y0, x1, y1 = box_convert((cx, cy, w, h), "center_to_corner")
        assert x0 == pytest.approx(b.x_min, abs=1e-9)
        assert y0 == pytest.approx(b.y_min, abs=1e-9)
        assert x1 == pytest.approx(b.x_max, abs=1e-9)
        assert y1 == pytest.approx(b.y_max, abs=1e-9)

    def test_unknown_mode(self):
        with pytest.raises(ValueError):
            box_convert(box(0, 0, 1, 1), "sideways")


class TestValidateSample:
    def test_well_formed(self):
        assert validate_sample(make_sample()) == []

    def test_dimension_mismatch(self):
        s = make_sample()
        s.tir = np.zeros((60, 64, 1), dtype=np.uint8)
        bad = validate_sample(s)
        assert len(bad) == 1 and "dimensions differ" in bad[0]

    def test_box_outside_frame(self):
        s = make_sample(boxes=[box(-1, 0, 5, 5)])
        bad = validate_sample(s)
        assert len(bad) == 1 and "boxes[0]" in bad[0] and "outside frame" in bad[0]

    def test_too_small(self):
        s = make_sample(h=16, w=64, boxes=[])
        assert any("at least 32x32" in v for v in validate_sample(s))

    def test_inverted_box(self):
        s = make_sample(boxes=[box(30, 10, 10, 20)])
        assert any("x_min" in v for v in validate_sample(s))


class TestManifestRoundTrip:
    def _manifest(self):
        records = [
            ManifestRecord(
                rgb_path=f"rgb/{i}.png",
                tir_path=f"tir/{i}.png",
                boxes=(box(1.5, 2.25, 30, 40, cid=i % 2),),
                split="train",
                source="unit",
            )
            for i in range(3)
        ]
        return DatasetManifest(records=records, num_classes=2, class_names=["a", "b"])

    def test_round_trip_identity(self, tmp_path):
        m = self._manifest()
        path = save_manifest(m, tmp_path / "m.jsonl")
        loaded = load_manifest(path)
        assert loaded.num_classes == m.num_classes
        assert loaded.class_names == m.class_names
        assert loaded.records == m.records

    def test_empty_manifest(self, tmp_path):
        m = DatasetManifest(records=[], num_classes=1, class_names=["x"])
        loaded = load_manifest(save_manifest(m, tmp_path / "m.jsonl"))
        assert loaded.records == []

    def test_bad_box_reports_line_number(self, tmp_path):
        m = self._manifest()
        path = save_manifest(m, tmp_path / "m.jsonl")
        lines = path.read_text().splitlines()
        # corrupt the record on line 3 (x_min > x_max)
        lines[2] = lines[2].replace("[1.5, 2.25, 30", "[50, 2.25, 30")
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(ManifestError, match="line 3"):
            load_manifest(path)

    def test_class_out_of_range(self, tmp_path):
        path = tmp_path / "m.jsonl"
        path.write_text(
            '{"num_classes": 1, "class_names": ["a"]}\n'
            '{"rgb_path": "r.png", "tir_path": "t.png", '
            '"boxes": [[0, 0, 5, 5, 3]], "split": "train", "source": "x"}\n'
        )
        with pytest.raises(ManifestError, match="class_id 3"):
            load_manifest(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ManifestError, match="not found"):
            load_manifest(tmp_path / "nope.jsonl")

    def test_unknown_field_rejected(self, tmp_path):
        path = tmp_path / "m.jsonl"
        path.write_text(
            '{"num_classes": 1, "class_names": ["a"]}\n'
            '{"rgb_path": "r.png", "tir_path": "t.png", "boxes": [], '
            '"split": "train", "source": "x", "extra": 1}\n'
        )
        with pytest.raises(ManifestError, match="unknown fields"):
            load_manifest(path)

    def test_duplicate_path_rejected(self, tmp_path):
        path = tmp_path / "m.jsonl"
        rec = (
            '{"rgb_path": "r.png", "tir_path": "t.png", "boxes": [], '
            '"split": "train", "source": "x"}\n'
        )
        path.write_text('{"num_classes": 1, "class_names": ["a"]}\n' + rec + rec)
        with pytest.raises(ManifestError, match="duplicate"):
            load_manifest(path)


class TestDetectionsFile:
    def test_round_trip(self, tmp_path):
        dets = [
            Detection("img0", box(1, 2, 3, 4, cid=0, score=0.9)),
            Detection("img1", box(5.5, 6.5, 9.0, 12.0, cid=1, score=0.25)),
        ]
        path = save_detections(dets, tmp_path / "d.det")
        assert load_detections(path) == dets

    def test_missing_field(self, tmp_path):
        path = tmp_path / "d.det"
        path.write_text('{"image_id": "a", "x_min": 0}\n')
        with pytest.raises(ManifestError, match="missing fields"):
            load_detections(path)
