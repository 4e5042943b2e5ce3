import io

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sdtrack import tracker as tracker_mod
from sdtrack.convnet import HeadNet, TrainSpec, save_net
from sdtrack.core import BoundingBox, TrackerConfig, gaussian_map
from sdtrack.features import StandInProvider
from sdtrack.harness import SyntheticSpec, synthesize
from sdtrack.prior import box_mask
from sdtrack.update import (PoolEntry, PositiveSamplePool, UpdateDecision, check_update_conditions,
                            finetune_hnet, selection_distribution, temporal_weight,
                            truncated_error, truncation_threshold)


def entry(frame, conf, c=2, n=10):
    z = np.zeros((n, n))
    return PoolEntry(frame, np.zeros((c, n, n)), z, z.astype(bool), conf)


def pool_of(confs, capacity=10, ratio=0.85):
    p = PositiveSamplePool(capacity, ratio)
    for i, c in enumerate(confs):
        p.try_insert(entry(i + 1, c))
    return p


class TestPool:
    def test_fills_then_evicts_min(self):
        p = pool_of([0.4, 0.6, 0.9], capacity=3)
        assert p.try_insert(entry(10, 0.5))
        assert sorted(p.confidences()) == [0.5, 0.6, 0.9]

    def test_ratio_condition(self):
        p = pool_of([1.0, 0.95, 0.92], capacity=3)
        assert p.try_insert(entry(10, 0.9))  # below the min, but 0.9 / 1.0 > 0.85
        assert sorted(p.confidences()) == [0.9, 0.95, 1.0]

    def test_rejected(self):
        p = pool_of([0.4, 1.0], capacity=2)
        assert not p.try_insert(entry(10, 0.3))
        assert sorted(p.confidences()) == [0.4, 1.0]

    def test_duplicate_frame(self):
        p = pool_of([0.5])
        with pytest.raises(ValueError, match="already pooled"):
            p.try_insert(entry(1, 0.7))

    def test_positive_confidence_required(self):
        with pytest.raises(ValueError):
            entry(1, 0.0)

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(0.01, 10), min_size=1, max_size=60), st.integers(1, 10))
    def test_capacity_and_monotone_min(self, confs, cap):
        # with ratio 1 only the "beats the minimum" rule can fire once full
        p = PositiveSamplePool(cap, 1.0)
        last_min = None
        for i, c in enumerate(confs):
            p.try_insert(entry(i + 1, c))
            assert len(p) <= cap
            if len(p) == cap:
                m = p.confidences().min()
                if last_min is not None:
                    assert m >= last_min
                last_min = m


class TestTemporalWeight:
    @pytest.mark.parametrize("t", [3, 10, 100, 1000])
    @pytest.mark.parametrize("theta", [0.3, 0.7])
    def test_endpoints(self, t, theta):
        assert abs(temporal_weight(1, t, theta) - 1) < 1e-9
        assert abs(temporal_weight(t, t, theta) - 1) < 1e-9

    def test_vertex(self):
        # a = 0.015, b = -0.165, c = 1.15 at t = 10, theta = 0.7
        assert abs(temporal_weight(5.5, 10, 0.7) - 0.69625) < 1e-9
        assert temporal_weight(4, 10, 0.7) == pytest.approx(0.015 * 16 - 0.165 * 4 + 1.15)

    def test_limit_min(self):
        low = min(temporal_weight(T, 1000, 0.7) for T in np.linspace(1, 1000, 4001))
        assert abs(low - 0.7) < 0.01

    def test_early_frames(self):
        assert temporal_weight(1, 1) == 1.0 and temporal_weight(2, 2, 0.3) == 1.0

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            temporal_weight(11, 10)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(3, 500), st.floats(-1.0, 0.99), st.data())
    def test_convex_and_bounded(self, t, theta, data):
        T1 = data.draw(st.floats(1, t))
        T2 = data.draw(st.floats(1, t))
        mid = temporal_weight((T1 + T2) / 2, t, theta)
        assert mid <= (temporal_weight(T1, t, theta) + temporal_weight(T2, t, theta)) / 2 + 1e-12
        assert temporal_weight(T1, t, theta) <= 1 + 1e-12


class TestSelection:
    def test_single(self):
        assert selection_distribution(pool_of([0.3]), 20).tolist() == [1.0]

    def test_ratio(self):
        # frames 1 and t both weigh 1
        p = PositiveSamplePool()
        p.try_insert(entry(1, 1.0))
        p.try_insert(entry(20, 0.5))
        assert selection_distribution(p, 20) == pytest.approx([2 / 3, 1 / 3])

    def test_empty(self):
        with pytest.raises(ValueError):
            selection_distribution(PositiveSamplePool(), 10)

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(0.01, 5), min_size=1, max_size=10), st.floats(0.01, 100),
           st.integers(0, 10 ** 6))
    def test_normalized_ordered_scale_invariant(self, confs, k, seed):
        rng = np.random.default_rng(seed)
        t = 50
        frames = rng.choice(np.arange(1, t + 1), len(confs), replace=False)
        p = PositiveSamplePool()
        for f, c in zip(frames, confs):
            p.try_insert(entry(int(f), c))
        P = selection_distribution(p, t)
        assert abs(P.sum() - 1) < 1e-12
        index = [temporal_weight(f, t) * c / max(confs) for f, c in zip(frames, confs)]
        for i in range(len(P)):
            for j in range(len(P)):
                if index[i] > index[j] + 1e-12:
                    assert P[i] > P[j]
        q = PositiveSamplePool()
        for f, c in zip(frames, confs):
            q.try_insert(entry(int(f), k * c))
        assert np.allclose(selection_distribution(q, t), P, atol=1e-12)


class TestConditions:
    rng = np.random.default_rng(0)

    def test_not_checkpoint(self):
        d = check_update_conditions(pool_of([1.0]), 0.1, 5, 37, self.rng)
        assert not d.fire and not d.checkpoint

    def test_confidence_gap_too_small(self):
        d = check_update_conditions(pool_of([1.0]), 0.6, 3, 40, self.rng)
        assert d.checkpoint and not d.fire
        assert d.sampled_confidence == 1.0

    def test_single_peak(self):
        assert not check_update_conditions(pool_of([1.0]), 0.4, 1, 40, self.rng).fire

    def test_fires(self):
        d = check_update_conditions(pool_of([1.0]), 0.4, 2, 40, self.rng)
        assert d.fire and d.index == 0 and d.probability == 1.0
        assert isinstance(d, UpdateDecision) and d.to_dict()["peak_count"] == 2

    def test_seeded_draws_reproducible(self):
        p = pool_of([0.5, 1.0, 0.8, 0.3])
        a = [check_update_conditions(p, 0.1, 2, 10 * k, np.random.default_rng(3)).index
             for k in range(1, 6)]
        b = [check_update_conditions(p, 0.1, 2, 10 * k, np.random.default_rng(3)).index
             for k in range(1, 6)]
        assert a == b


class TestTruncation:
    @settings(max_examples=200)
    @given(st.floats(-10, 10), st.floats(1e-3, 10), st.floats(0, 1))
    def test_piecewise(self, e, eps, phi):
        thr = eps / (20 + 30 * phi)
        got = float(truncated_error(np.array(e), eps, 20, 30, phi))
        assert got == (0.0 if abs(e) <= thr else abs(e))

    def test_foreground_more_sensitive(self):
        eps = 1.0
        assert truncation_threshold(eps, 20, 30, 1.0) == pytest.approx(eps / 50)
        assert truncation_threshold(eps, 20, 30, 0.0) == pytest.approx(eps / 20)
        e = 0.03  # between the two thresholds
        assert truncated_error(np.array(e), eps, 20, 30, 1.0) == e
        assert truncated_error(np.array(e), eps, 20, 30, 0.0) == 0


def _entry_from(features, box, frame, conf=1.0):
    n = features.shape[1]
    return PoolEntry(frame, features, gaussian_map(box, (n, n)), box_mask(box, (n, n)), conf)


class TestFinetune:
    def test_decay_only_when_everything_truncated(self):
        rng = np.random.default_rng(0)
        net = HeadNet.create(3, hidden=2, seed=0, std=0.1, k1=3, k2=3)
        box = BoundingBox(5, 5, 4, 4)
        pos = _entry_from(rng.normal(size=(3, 10, 10)), box, 1)
        cur = _entry_from(rng.normal(size=(3, 10, 10)), box, 2)
        w0 = [l.weight.copy() for l in net.layers]
        b0 = [l.bias.copy() for l in net.layers]
        lr, beta, n = 0.01, 0.5, 7
        out = finetune_hnet(net, pos, cur, iterations=n, lr=lr, beta_w=beta, eps=1e9)
        assert not out.reverted
        for l, w, b in zip(net.layers, w0, b0):
            assert np.allclose(l.weight, w * (1 - 2 * lr * beta) ** n)
            assert np.array_equal(l.bias, b)

    def test_positive_loss_drops_on_drifted_frame(self):
        spec = SyntheticSpec(n_frames=40, hue_drift=0.03, seed=0)
        ds = synthesize(spec)
        prov = StandInProvider()

        def feats(i):
            b = ds.gt[i]
            side = 2 * b.w
            roi = tracker_mod.Roi(b.cx, b.cy, side)
            _, coarse = prov.provide(roi.crop(ds.frame(i), 92))
            return coarse[:16] / (np.abs(coarse[:16]).max() + 1e-9), roi.box_to_heat(b)

        x1, hb1 = feats(0)
        net = HeadNet.create(16, hidden=4, seed=1, std=0.05)
        net, _ = tracker_mod.fit_head(net, x1, gaussian_map(hb1, (46, 46)), TrainSpec(60, 1e-5))
        x_old, hb_old = feats(20)
        x_new, hb_new = feats(39)
        pos = _entry_from(x_old, hb_old, 21)
        cur = _entry_from(x_new, hb_new, 40)
        out = finetune_hnet(net, pos, cur, iterations=20, lr=1e-5)
        assert not out.reverted
        assert out.positive_post < out.positive_pre
        assert out.post_loss < out.pre_loss

    def test_divergence_reverts(self):
        rng = np.random.default_rng(1)
        net = HeadNet.create(3, hidden=2, seed=0, std=0.5, k1=3, k2=3)
        box = BoundingBox(5, 5, 4, 4)
        pos = _entry_from(100 * rng.normal(size=(3, 10, 10)), box, 1)
        cur = _entry_from(100 * rng.normal(size=(3, 10, 10)), box, 2)
        before = save_net(net, io.BytesIO())
        out = finetune_hnet(net, pos, cur, iterations=20, lr=10.0)
        assert out.reverted
        assert save_net(net, io.BytesIO()) == before


def test_update_leaves_part_heads_alone(monkeypatch):
    fired = []

    def always(pool, conf, peaks, frame_idx, rng, *a, **k):
        fired.append(frame_idx)
        return UpdateDecision(True, True, 0, 1.0, 1.0, conf, peaks)

    monkeypatch.setattr(tracker_mod, "check_update_conditions", always)
    ds = synthesize(SyntheticSpec(n_frames=4, seed=5, velocity=(2.0, 0.0)))
    cfg = TrackerConfig(head_iters=10, selector_iters=5, update_lr=1e-6, seed=5)
    tr = tracker_mod.Tracker(cfg)
    tr.initialize(ds.frame(0), ds.gt[0])
    parts0 = [save_net(n, io.BytesIO()) for n in tr.ensemble.pnets]
    h0 = save_net(tr.ensemble.hnet, io.BytesIO())
    results = [tr.track_frame(ds.frame(i)) for i in range(1, 4)]
    assert fired and any(r.update is not None for r in results)
    assert [save_net(n, io.BytesIO()) for n in tr.ensemble.pnets] == parts0
    if any(r.update_fired for r in results):
        assert save_net(tr.ensemble.hnet, io.BytesIO()) != h0


def test_no_update_ablation_never_finetunes(monkeypatch):
    monkeypatch.setattr(tracker_mod, "check_update_conditions",
                        lambda pool, conf, peaks, *a, **k: UpdateDecision(True, True, 0, 1.0, 1.0,
                                                                          conf, peaks))
    ds = synthesize(SyntheticSpec(n_frames=3, seed=6))
    tr = tracker_mod.Tracker(TrackerConfig(head_iters=5, selector_iters=5), ablation="no_update")
    tr.initialize(ds.frame(0), ds.gt[0])
    h0 = save_net(tr.ensemble.hnet, io.BytesIO())
    results = [tr.track_frame(ds.frame(i)) for i in (1, 2)]
    assert not any(r.update_fired or r.update for r in results)
    assert save_net(tr.ensemble.hnet, io.BytesIO()) == h0
