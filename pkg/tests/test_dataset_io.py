import io
import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from pedloc import dataset_io as dio
from pedloc import geometry as G

SAMPLE = "Pedestrian 0.00 0 -0.20 712.40 143.00 810.73 307.92 1.89 0.48 1.20 1.84 1.47 8.41 0.01"


def test_parse_standard_line():
    (obj,) = dio.parse_kitti_labels([SAMPLE])
    assert obj.object_class == "Pedestrian"
    assert obj.location == (1.84, 1.47, 8.41)
    assert obj.bbox == (712.40, 143.00, 810.73, 307.92)
    assert obj.dimensions == (1.89, 0.48, 1.20)
    assert obj.rotation_y == 0.01
    assert obj.score is None
    # [DERIVED] sqrt(1.84^2 + 1.47^2 + 8.41^2)
    assert obj.distance == pytest.approx(8.7336, abs=1e-4)


def test_parse_sixteen_fields_with_score():
    (obj,) = dio.parse_kitti_labels([SAMPLE + " 0.93"])
    assert obj.score == pytest.approx(0.93)


def test_parse_dontcare_and_blank_lines():
    text = "\n".join([
        SAMPLE,
        "",
        "DontCare -1 -1 -10 503.89 169.71 590.61 190.13 -1 -1 -1 -1000 -1000 -1000 -10",
    ])
    objs = dio.parse_kitti_labels(io.StringIO(text))
    assert [o.object_class for o in objs] == ["Pedestrian", "DontCare"]


@pytest.mark.parametrize("line, fragment", [
    (" ".join(SAMPLE.split()[:14]), "expected 15 or 16 fields, got 14"),
    (SAMPLE.replace("8.41", "abc"), "non-numeric"),
    (SAMPLE.replace(" 0 -0.20", " 5 -0.20"), "occluded"),
    (SAMPLE.replace("0.00 0", "1.50 0"), "truncated"),
    (SAMPLE.replace("712.40 143.00 810.73", "900.00 143.00 810.73"), "bbox"),
])
def test_malformed_lines_located(line, fragment):
    with pytest.raises(dio.ParseError) as info:
        dio.parse_kitti_labels([SAMPLE, "", line])
    assert info.value.line == 3
    assert fragment in str(info.value)
    assert str(info.value).startswith("line 3:")


def test_format_kitti_round_trip():
    (obj,) = dio.parse_kitti_labels([SAMPLE])
    assert dio.format_kitti_object(obj) == SAMPLE


def test_parse_calib():
    calib = ("P0: 1 0 0 0 0 1 0 0 0 0 1 0\n"
             "P2: 7.215377e+02 0.000000e+00 6.095593e+02 4.485728e+01 0.000000e+00 7.215377e+02 "
             "1.728540e+02 2.163791e-01 0.000000e+00 0.000000e+00 1.000000e+00 2.745884e-03\n")
    k = dio.parse_kitti_calib(io.StringIO(calib))
    assert (k.fx, k.fy, k.cx, k.cy) == pytest.approx((721.5377, 721.5377, 609.5593, 172.854))
    with pytest.raises(dio.ParseError):
        dio.parse_kitti_calib(io.StringIO("P0: 1 2 3\n"))
    with pytest.raises(dio.ParseError) as info:
        dio.parse_kitti_calib(io.StringIO("P2: 1 2 3\n"))
    assert info.value.line == 1


def _records(n, seed=0):
    samples = G.synth_scene(n, seed, G.SynthConfig(pixel_noise_sigma=1.5, occlusion_prob=0.2))
    out = []
    for i, s in enumerate(samples):
        gt = None if i % 7 == 0 else s.gt_distance
        r = dio.KeypointRecord.from_keypoints(s.keypoints, frame=i // 3, track_id=i % 3, gt_distance=gt)
        out.append(r)
    return out


def test_keypoint_file_round_trip_identity():
    records = _records(1000)
    buf = io.StringIO()
    dio.write_keypoints(records, buf)
    text = buf.getvalue()
    back = dio.read_keypoints(io.StringIO(text))
    assert back == records
    buf2 = io.StringIO()
    dio.write_keypoints(back, buf2)
    assert buf2.getvalue() == text


@given(st.lists(st.floats(-1e6, 1e6, allow_nan=False), min_size=34, max_size=34),
       st.lists(st.floats(0, 1), min_size=17, max_size=17))
def test_record_round_trip_property(coords, conf):
    joints = np.column_stack([np.reshape(coords, (17, 2)), conf])
    r = dio.KeypointRecord(3, 9, joints, (1.0, 2.0, 3.5, 4.25), 12.5)
    assert dio.parse_record(dio.format_record(r)) == r


def test_record_schema_errors():
    r = _records(1)[0]
    fields = dio.format_record(r).split()
    with pytest.raises(dio.SchemaError) as info:
        dio.read_keypoints(["# header", dio.format_record(r), " ".join(fields[:-3])])
    assert info.value.index == 1
    assert "16 joints" in str(info.value)
    bad_conf = fields.copy()
    bad_conf[9] = "1.5"
    with pytest.raises(dio.SchemaError):
        dio.parse_record(" ".join(bad_conf))


def test_missing_ground_truth_written_as_dash():
    r = dio.KeypointRecord(0, 0, np.zeros((17, 3)), (0, 0, 1, 1))
    assert dio.format_record(r).split()[6] == "-"
    assert dio.parse_record(dio.format_record(r)).gt_distance is None


def test_to_keypoints_confidence_threshold():
    joints = np.zeros((17, 3))
    joints[:, 2] = np.linspace(0, 1, 17)
    r = dio.KeypointRecord(0, 0, joints, (0, 0, 10, 10))
    assert r.to_keypoints(0.5).num_visible == 8
    assert r.to_keypoints().num_visible == 16


def test_iou_hand_values():
    assert dio.iou((0, 0, 2, 2), (1, 1, 3, 3)) == pytest.approx(1 / 7)
    assert dio.iou((0, 0, 1, 1), (2, 2, 3, 3)) == 0.0
    assert dio.iou((0, 0, 1, 1), (0, 0, 1, 1)) == 1.0


def test_crossed_overlaps_take_highest_first():
    records = [(0, 0, 10, 10), (4, 0, 14, 10)]
    objects = [(3, 0, 13, 10), (0, 0, 9, 10)]
    pairs = dio.match_pairs(records, objects, 0.3)
    # IoU(r0, o1) = 90/100 beats IoU(r1, o0) = 90/110; r0 also overlaps o0 (70/130)
    assert [(i, j) for i, j, _ in pairs] == [(0, 1), (1, 0)]
    assert pairs[0][2] == pytest.approx(0.9) and pairs[1][2] == pytest.approx(9 / 11)


def _brute_force(record_boxes, object_boxes, thr):
    """Matching whose IoU values, sorted descending, are lexicographically largest."""
    valid = {(i, j): dio.iou(r, o) for i, r in enumerate(record_boxes) for j, o in enumerate(object_boxes)}
    valid = {k: v for k, v in valid.items() if v >= thr and v > 0}
    best, best_key = [], ()
    keys = list(valid)
    for size in range(len(keys) + 1):
        for combo in itertools.combinations(keys, size):
            if len({i for i, _ in combo}) < size or len({j for _, j in combo}) < size:
                continue
            key = tuple(sorted((valid[c] for c in combo), reverse=True))
            if key > best_key:
                best, best_key = combo, key
    return sorted(best)


def test_greedy_matches_brute_force_oracle():
    rng = np.random.default_rng(0)
    for _ in range(100):
        def boxes(n):
            xy = rng.uniform(0, 20, size=(n, 2))
            wh = rng.uniform(4, 10, size=(n, 2))
            return [tuple(np.concatenate([p, p + s])) for p, s in zip(xy, wh)]
        rb, ob = boxes(rng.integers(1, 5)), boxes(rng.integers(1, 5))
        greedy = sorted((i, j) for i, j, _ in dio.match_pairs(rb, ob, 0.2))
        assert greedy == _brute_force(rb, ob, 0.2)


def test_match_keypoints_to_labels():
    (ped,) = dio.parse_kitti_labels([SAMPLE])
    car = dio.parse_kitti_labels([SAMPLE.replace("Pedestrian", "Car")])[0]
    joints = np.zeros((17, 3))
    hit = dio.KeypointRecord(5, 1, joints, (713.0, 144.0, 810.0, 307.0))
    miss = dio.KeypointRecord(5, 2, joints, (0.0, 0.0, 50.0, 50.0))
    out = dio.match_keypoints_to_labels([miss, hit], [car, ped])
    assert len(out) == 1
    assert out[0].track_id == 1
    assert out[0].gt_distance == pytest.approx(ped.distance)
    # cars are never matched
    assert dio.match_keypoints_to_labels([hit], [car]) == []
    with pytest.raises(ValueError):
        dio.match_pairs([], [], 0.0)


def test_split_dataset_deterministic_and_disjoint():
    a = dio.split_dataset(range(100), 0.8, seed=3)
    b = dio.split_dataset(range(100), 0.8, seed=3)
    c = dio.split_dataset(range(100), 0.8, seed=4)
    assert a == b and a != c
    assert len(a.train) == 80 and len(a.val) == 20
    assert sorted(a.train + a.val) == list(range(100))
    with pytest.raises(ValueError):
        dio.split_dataset([], 0.5, 0)
    with pytest.raises(ValueError):
        dio.split_dataset(range(3), 1.0, 0)
