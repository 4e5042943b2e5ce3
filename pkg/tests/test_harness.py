import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sdtrack.core import BoundingBox, TrackerConfig, write_image
from sdtrack.harness import (EvalReport, SequenceDataset, SyntheticSpec, Trace, benchmark, evaluate,
                             load_sequence, parse_groundtruth, run_tracker, save_sequence, synthesize)

FAST = TrackerConfig(head_iters=20, selector_iters=10, n_particles=200)


def make_seq(tmp_path, n_frames, gt_lines, gray=False):
    img = tmp_path / "seq" / "img"
    img.mkdir(parents=True)
    rng = np.random.default_rng(0)
    for i in range(n_frames):
        f = rng.random((24, 32)) if gray else rng.random((24, 32, 3))
        write_image(img / f"{i + 1:04d}.png", f)
    (tmp_path / "seq" / "groundtruth_rect.txt").write_text("\n".join(gt_lines) + "\n")
    return tmp_path / "seq"


class TestLoad:
    def test_length(self, tmp_path):
        ds = load_sequence(make_seq(tmp_path, 3, ["1,1,5,5"] * 3))
        assert len(ds) == 3 and ds.color and ds.name == "seq"

    def test_top_left_to_center(self, tmp_path):
        ds = load_sequence(make_seq(tmp_path, 2, ["10,20,30,40", "0 0 4 4"]))
        b = ds.gt[0]
        assert (b.cx, b.cy, b.w, b.h) == (25, 40, 30, 40)
        assert ds.gt[1].cx == 2

    def test_count_mismatch_names_file(self, tmp_path):
        seq = make_seq(tmp_path, 3, ["1,1,5,5"] * 2)
        with pytest.raises(ValueError, match="groundtruth_rect.txt"):
            load_sequence(seq)
        assert len(load_sequence(seq, require_gt=False).gt) == 2

    def test_bad_line_number(self, tmp_path):
        seq = make_seq(tmp_path, 2, ["1,1,5,5", "1,x,5,5"])
        with pytest.raises(ValueError, match=":2:"):
            load_sequence(seq)

    def test_missing_frame(self, tmp_path):
        seq = make_seq(tmp_path, 3, ["1,1,5,5"] * 3)
        (seq / "img" / "0002.png").unlink()
        with pytest.raises(FileNotFoundError, match="missing frames"):
            load_sequence(seq)

    def test_no_img_dir(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_sequence(tmp_path)

    def test_grayscale_flag(self, tmp_path):
        assert not load_sequence(make_seq(tmp_path, 2, ["1,1,5,5"] * 2, gray=True)).color

    def test_one_frame_rejected(self):
        with pytest.raises(ValueError, match="at least 2"):
            SequenceDataset("x", [BoundingBox(1, 1, 2, 2)], frames=[np.zeros((4, 4, 3))])

    def test_save_load_round_trip(self, tmp_path):
        ds = synthesize(SyntheticSpec(n_frames=3, velocity=(1.5, 0.5), seed=2))
        back = load_sequence(save_sequence(ds, tmp_path / "s"))
        for a, b in zip(ds.gt, back.gt):
            assert np.allclose([a.cx, a.cy, a.w, a.h], [b.cx, b.cy, b.w, b.h], atol=1e-4)
        assert np.abs(back.frame(1) - ds.frame(1)).max() <= 1 / 255 + 1e-9


def shift(b, dx, dy):
    return BoundingBox(b.cx + dx, b.cy + dy, b.w, b.h)


def _ds(boxes):
    return SequenceDataset("d", boxes, frames=[np.zeros((4, 4, 3))] * len(boxes))


class TestEvaluate:
    def test_perfect(self):
        gt = [BoundingBox(50 + i, 50, 100, 100) for i in range(5)]
        r = evaluate(gt, _ds(gt))
        assert (r.overlap, r.center_error, r.success, r.precision) == (1.0, 0.0, 1.0, 1.0)

    def test_shift_25(self):
        gt = [BoundingBox(100, 100, 100, 100)] * 4
        r = evaluate([shift(b, 25, 0) for b in gt], _ds(gt))
        # raster check of the overlap
        xs = np.arange(0, 300) + 0.5
        a = (xs >= 50) & (xs < 150)
        b = (xs >= 75) & (xs < 175)
        raster = (a & b).sum() / (a | b).sum()
        assert r.overlap == pytest.approx(0.6) and raster == pytest.approx(0.6)
        assert r.precision == 0.0 and r.success == 1.0 and r.center_error == pytest.approx(25)

    def test_half(self):
        gt = [BoundingBox(50, 50, 20, 20)] * 6
        trace = gt[:3] + [shift(b, 100, 0) for b in gt[3:]]
        assert evaluate(trace, _ds(gt)).success == 0.5

    def test_length_mismatch(self):
        gt = [BoundingBox(50, 50, 20, 20)] * 3
        with pytest.raises(ValueError, match="2 frames"):
            evaluate(gt[:2], _ds(gt))

    @settings(max_examples=50)
    @given(st.lists(st.tuples(st.floats(0, 100), st.floats(0, 100), st.floats(1, 50), st.floats(1, 50)),
                    min_size=2, max_size=10))
    def test_perfect_fixed_point_and_ranges(self, rows):
        gt = [BoundingBox(*r) for r in rows]
        r = evaluate(gt, _ds(gt))
        assert (r.overlap, r.center_error, r.success, r.precision) == pytest.approx((1, 0, 1, 1))
        moved = evaluate([shift(b, 7, -3) for b in gt], _ds(gt))
        assert 0 <= moved.overlap <= 1 and moved.center_error >= 0
        assert 0 <= moved.success <= 1 and 0 <= moved.precision <= 1

    def test_report_json_round_trip(self):
        gt = [BoundingBox(50, 50, 20, 20)] * 3
        r = evaluate([shift(b, 1.25, 0) for b in gt], _ds(gt))
        back = EvalReport.from_json(r.to_json())
        assert back == r and back.to_json() == r.to_json()


class TestSynthesize:
    def test_static_gt_constant(self):
        ds = synthesize(SyntheticSpec(n_frames=10))
        assert all(b == ds.gt[0] for b in ds.gt)

    def test_teleport_exactly_at_frame(self):
        spec = SyntheticSpec(n_frames=40, start=(80, 120), velocity=(1, 0), teleport_frame=30,
                             teleport_offset=(120, 0))
        ds = synthesize(spec)
        dx = [ds.gt[i].cx - ds.gt[i - 1].cx for i in range(1, 40)]
        assert dx[28] == 121 and all(d == 1 for i, d in enumerate(dx) if i != 28)

    def test_deterministic(self):
        a = synthesize(SyntheticSpec(n_frames=3, seed=4, hue_drift=0.1))
        b = synthesize(SyntheticSpec(n_frames=3, seed=4, hue_drift=0.1))
        assert all(np.array_equal(x, y) for x, y in zip(a.frames, b.frames))

    def test_leaving_canvas(self):
        with pytest.raises(ValueError, match="leaves"):
            synthesize(SyntheticSpec(n_frames=100, velocity=(5, 0)))

    def test_target_drawn(self):
        ds = synthesize(SyntheticSpec(n_frames=2, noise=0.0))
        f = ds.frame(0)
        # top-left quadrant is red-ish, background is gray-ish
        assert f[110, 90, 0] > 0.6 and f[110, 90, 2] < 0.3
        assert abs(f[20, 20, 0] - f[20, 20, 1]) < 0.15

    def test_spec_dict_round_trip(self):
        spec = SyntheticSpec(distracter_start=(200, 100), velocity=(1, 0))
        back = SyntheticSpec.from_dict(json.loads(json.dumps(spec.to_dict())))
        assert back == spec
        with pytest.raises(ValueError, match="unknown"):
            SyntheticSpec.from_dict({"colour": 1})


@pytest.fixture(scope="module")
def small_seq():
    return synthesize(SyntheticSpec(n_frames=4, velocity=(2, 1), seed=1))


class TestRuns:
    def test_same_seed_same_trace(self, small_seq, tmp_path):
        a = run_tracker(small_seq, FAST)
        b = run_tracker(small_seq, FAST)
        a.write(tmp_path / "a.jsonl")
        b.write(tmp_path / "b.jsonl")
        assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
        assert len(a.records) == 4 and a.records[0]["frame"] == 1

    def test_no_update_has_no_events(self, small_seq):
        tr = run_tracker(small_seq, FAST.replace(update_period=1, update_conf_ratio=1.0), "no_update")
        assert tr.update_events() == [] and all("update" not in r for r in tr.records)

    def test_rectify_noop_without_multiple_peaks(self, small_seq):
        full = run_tracker(small_seq, FAST, "full")
        assert all(r["n_h"] < 2 for r in full.records)
        assert run_tracker(small_seq, FAST, "no_rectify").records == full.records

    def test_unknown_ablation(self, small_seq):
        with pytest.raises(ValueError, match="unknown ablation"):
            run_tracker(small_seq, FAST, "bogus")

    def test_trace_round_trip(self, small_seq, tmp_path):
        tr = run_tracker(small_seq, FAST)
        tr.write(tmp_path / "t.jsonl")
        back = Trace.read(tmp_path / "t.jsonl")
        assert back.records == tr.records and back.config == tr.config
        summary = json.loads((tmp_path / "t.summary.json").read_text())
        assert summary["frames"] == 4 and summary["ablation"] == "full"

    def test_benchmark_sorted_and_matches_serial(self, small_seq):
        other = synthesize(SyntheticSpec(n_frames=3, seed=2, name="a_first"))
        reps = benchmark([small_seq, other], FAST, workers=2)
        assert [r.name for r in reps] == ["a_first", "synthetic"]
        assert reps[1] == evaluate(run_tracker(small_seq, FAST), small_seq)


def test_parse_groundtruth_whitespace(tmp_path):
    p = tmp_path / "g.txt"
    p.write_text("1\t2\t3\t4\n\n5,6,7,8\n")
    assert [b.to_xywh() for b in parse_groundtruth(p)] == [(1, 2, 3, 4), (5, 6, 7, 8)]
