from __future__ import annotations

import numpy as np
import pytest
import torch

from cervia import evaluation as ev
from cervia.dataset import ViaLabel
from cervia.model import BackboneSpec, BottleneckSpec, Mode, build_model, set_mode
from cervia.preprocess import ChannelStats
from cervia.raster import normalized_raster, unit_raster


def tiny_handle(seed=3, input_size=16, dropout=0.0):
    spec = BackboneSpec(
        input_size=input_size,
        stem_channels=8,
        stem_stride=2,
        groups=(BottleneckSpec(6, 8, 1, 1), BottleneckSpec(6, 16, 1, 2)),
        dropout=dropout,
    )
    return build_model(spec, seed=seed)


class TestConfusion:
    def test_all_correct(self):
        preds = [1, 1, 0, 0]
        truth = [1, 1, 0, 0]
        cm = ev.confusion(preds, truth)
        assert (cm.tp, cm.fn, cm.tn, cm.fp) == (2, 0, 2, 0)

    def test_all_flipped(self):
        cm = ev.confusion([0, 0, 1, 1], [1, 1, 0, 0])
        assert (cm.tp, cm.fn, cm.tn, cm.fp) == (0, 2, 0, 2)

    def test_accepts_enum_labels(self):
        cm = ev.confusion(
            [ViaLabel.VIA_POSITIVE, ViaLabel.VIA_NEGATIVE],
            [ViaLabel.VIA_POSITIVE, ViaLabel.VIA_POSITIVE],
        )
        assert (cm.tp, cm.fn, cm.tn, cm.fp) == (1, 1, 0, 0)

    def test_length_mismatch(self):
        with pytest.raises(ev.MetricsError):
            ev.confusion([1], [1, 0])

    def test_empty_rejected(self):
        with pytest.raises(ev.MetricsError):
            ev.confusion([], [])

    def test_published_triple_has_unique_integer_solution(self):
        # brute-force every non-negative quadruple summing to 143 against the
        # published percentages; exactly one must survive
        solutions = []
        for tp in range(144):
            for fn in range(144 - tp):
                for tn in range(144 - tp - fn):
                    fp = 143 - tp - fn - tn
                    acc = 100.0 * (tp + tn) / 143
                    if abs(acc - 92.31) > 0.01:
                        continue
                    if tp + fn == 0 or tn + fp == 0:
                        continue
                    sens = 100.0 * tp / (tp + fn)
                    spec = 100.0 * tn / (tn + fp)
                    if abs(sens - 98.24) > 0.02 or abs(spec - 88.37) > 0.01:
                        continue
                    solutions.append((tp, fn, tn, fp))
        assert solutions == [(56, 1, 76, 10)]

    def test_matches_brute_force_recount(self, rng):
        preds = rng.integers(0, 2, size=200)
        truth = rng.integers(0, 2, size=200)
        cm = ev.confusion(preds, truth)
        counts = {"tp": 0, "fn": 0, "tn": 0, "fp": 0}
        for p, t in zip(preds, truth):
            if t == 1:
                counts["tp" if p == 1 else "fn"] += 1
            else:
                counts["fp" if p == 1 else "tn"] += 1
        assert (cm.tp, cm.fn, cm.tn, cm.fp) == (
            counts["tp"], counts["fn"], counts["tn"], counts["fp"],
        )


class TestMetrics:
    def test_published_counts_reproduce_percentages(self):
        m = ev.metrics(ev.ConfusionMatrix(tp=56, fn=1, tn=76, fp=10))
        assert 100 * m["accuracy"] == pytest.approx(92.31, abs=0.01)
        assert 100 * m["specificity"] == pytest.approx(88.37, abs=0.01)
        # the published 98.24 truncates 56/57 = 98.2456...
        assert 100 * m["sensitivity"] == pytest.approx(98.24, abs=0.02)

    def test_perfect_two_record_case(self):
        m = ev.metrics(ev.ConfusionMatrix(1, 0, 1, 0))
        assert m["accuracy"] == 1.0
        assert m["sensitivity"] == 1.0
        assert m["specificity"] == 1.0

    def test_absent_class_is_undefined_not_zero(self):
        m = ev.metrics(ev.ConfusionMatrix(0, 0, 5, 0))
        assert m["sensitivity"] is None
        assert "sensitivity" in m["undefined"]
        assert m["specificity"] == 1.0

    def test_empty_matrix_rejected(self):
        with pytest.raises(ev.MetricsError):
            ev.metrics(ev.ConfusionMatrix(0, 0, 0, 0))

    def test_negative_counts_rejected(self):
        with pytest.raises(ValueError):
            ev.ConfusionMatrix(-1, 0, 0, 2)

    def test_accuracy_is_prevalence_weighted_combination(self, rng):
        for _ in range(25):
            tp, fn, tn, fp = (int(x) for x in rng.integers(1, 40, size=4))
            cm = ev.ConfusionMatrix(tp, fn, tn, fp)
            m = ev.metrics(cm)
            prevalence = (tp + fn) / cm.n
            combined = m["sensitivity"] * prevalence + m["specificity"] * (1 - prevalence)
            assert m["accuracy"] == pytest.approx(combined, abs=1e-12)


class TestGradcam:
    def test_zeroed_head_gives_zero_map(self):
        handle = tiny_handle()
        with torch.no_grad():
            handle.module.head.fc.weight.zero_()
        img = np.random.default_rng(0).normal(size=(16, 16, 3)).astype(np.float32)
        cam = ev.gradcam(handle, img)
        assert cam.heatmap.min() == 0.0 and cam.heatmap.max() == 0.0
        assert cam.upsampled.max() == 0.0

    def test_bounds_and_shapes(self):
        handle = tiny_handle()
        img = np.random.default_rng(1).normal(size=(16, 16, 3)).astype(np.float32)
        cam = ev.gradcam(handle, img)
        assert cam.heatmap.shape == (4, 4)  # 16 / (stem 2 * group 2)
        assert cam.upsampled.shape == (16, 16)
        assert 0.0 <= cam.heatmap.min() and cam.heatmap.max() <= 1.0
        assert cam.heatmap.max() == pytest.approx(1.0)

    def test_invariant_to_positive_head_rescaling(self):
        handle = tiny_handle(seed=9)
        img = np.random.default_rng(2).normal(size=(16, 16, 3)).astype(np.float32)
        before = ev.gradcam(handle, img).heatmap
        with torch.no_grad():
            handle.module.head.fc.weight.mul_(2.0)
        after = ev.gradcam(handle, img).heatmap
        np.testing.assert_allclose(before, after, atol=1e-5)

    def test_unknown_layer_rejected(self):
        handle = tiny_handle()
        img = np.zeros((16, 16, 3), np.float32)
        with pytest.raises(ValueError, match="unknown target layer"):
            ev.gradcam(handle, img, target_layer="decoder")

    def test_train_mode_rejected(self):
        handle = tiny_handle(dropout=0.5)
        set_mode(handle, Mode.TRAIN)
        with pytest.raises(ValueError):
            ev.gradcam(handle, np.zeros((16, 16, 3), np.float32))

    def test_accepts_normalized_raster(self):
        handle = tiny_handle()
        img = normalized_raster(
            np.random.default_rng(3).normal(size=(16, 16, 3)).astype(np.float32)
        )
        cam = ev.gradcam(handle, img)
        assert cam.target_layer == "features"


class TestOverlay:
    def test_zero_heatmap_blends_coldest_color(self):
        img = unit_raster(np.full((8, 8, 3), 0.5, np.float32))
        heat = np.zeros((8, 8), np.float32)
        out = ev.overlay(img, heat, blend=0.4)
        cold = ev.heat_colormap(np.zeros(1))[0]
        expected = 0.6 * 0.5 + 0.4 * cold
        np.testing.assert_allclose(out.data[0, 0], expected, atol=1e-6)

    def test_full_heatmap_blends_hottest_color(self):
        img = unit_raster(np.zeros((8, 8, 3), np.float32))
        out = ev.overlay(img, np.ones((8, 8), np.float32), blend=0.4)
        hot = ev.heat_colormap(np.ones(1))[0]
        np.testing.assert_allclose(out.data[3, 3], 0.4 * hot, atol=1e-6)

    def test_output_within_unit_range(self, rng):
        img = unit_raster(rng.random((16, 16, 3), dtype=np.float32))
        heat = rng.random((4, 4), dtype=np.float32)  # also exercises upsampling
        out = ev.overlay(img, heat)
        assert out.data.min() >= 0.0 and out.data.max() <= 1.0
        assert out.data.shape == (16, 16, 3)


class TestEvaluate:
    def test_report_fields_and_counts(self, rng):
        handle = tiny_handle()
        images = rng.random((10, 16, 16, 3), dtype=np.float32)
        truth = rng.integers(0, 2, size=10)
        stats = ChannelStats((0.5,) * 3, (0.25,) * 3, "train", 10)
        report = ev.evaluate(handle, images, truth, stats, split_tag="test")
        assert report.cm.n == 10
        assert len(report.predictions) == 10
        d = report.as_dict()
        assert d["split"] == "test"
        assert set(d["confusion"]) == {"tp", "fn", "tn", "fp"}
