"""Detector assembly: parameters, staged forward shapes, checkpoints."""

import math

import numpy as np
import pytest

from poidet.kernels.checkpoint import load_checkpoint, save_checkpoint
from poidet.pillars import PillarGridSpec
from poidet.pipeline.config import (
    AblationSwitches,
    ModelConfig,
    PipelineConfig,
    ProposalConfig,
)
from poidet.pipeline.model import FOCAL_BIAS, SENSOR, STRIDE, Detector


def tiny_cfg(**switch_kwargs) -> PipelineConfig:
    base = PipelineConfig()
    return base.replace(
        grid=PillarGridSpec(0.0, 8.0, -4.0, 4.0, 0.5, 0.5, 8, 64),
        model=ModelConfig(pfn_channels=8, mid_channels=8, out_channels=8,
                          n_keypoints=1, fc_width=16, rroi_samples=4),
        switches=AblationSwitches(**switch_kwargs) if switch_kwargs
        else base.switches,
        proposals=ProposalConfig(pre_nms_top=64, post_nms_top=16, nms_iou=0.5),
    )


def make_detector(seed=0, **switch_kwargs) -> Detector:
    return Detector(tiny_cfg(**switch_kwargs), {0: (1.8, 4.2, 1.6)},
                    {0: 0.8}, seed=seed)


def random_cloud(n=400, seed=0) -> np.ndarray:
    r = np.random.default_rng(seed)
    return np.column_stack([
        r.uniform(0.0, 8.0, n), r.uniform(-4.0, 4.0, n),
        r.uniform(0.0, 2.0, n), r.uniform(0.0, 1.0, n)])


class TestConstruction:
    def test_anchor_layout(self):
        det = make_detector()
        assert det.head_rows == det.head_cols == 8
        assert len(det.anchors) == 8 * 8 * 1 * 2
        assert det.class_ids == (0,)
        np.testing.assert_array_equal(det._class_anchor_idx[0],
                                      np.arange(len(det.anchors)))

    def test_param_shapes_poi(self):
        det = make_detector()
        shapes = det.param_shapes()
        assert shapes["pfn.w"] == (8, 9)
        assert shapes["rpn.cls_w"] == (2, 8)
        assert shapes["rpn.reg_w"] == (14, 8)
        assert shapes["refine.fc1_w"] == (16, 5 * 8)
        assert shapes["att.w"] == (1, 8)
        assert set(det.params) == set(shapes)
        assert det.stage2_width() == 40

    def test_param_shapes_baseline_and_rroi(self):
        base = make_detector(second_stage=False, poi_pool=False,
                             visibility=False, adaptive=False)
        assert not any(k.startswith(("refine.", "att.")) for k in base.params)
        rroi = make_detector(second_stage=True, poi_pool=False,
                             visibility=False, adaptive=False, rroi="4x4")
        assert rroi.stage2_width() == 4 * 4 * 8
        assert rroi.param_shapes()["refine.fc1_w"] == (16, 128)
        assert "att.w" not in rroi.params

    def test_init_determinism_and_priors(self):
        a, b, c = make_detector(0), make_detector(0), make_detector(1)
        for name in a.params:
            np.testing.assert_array_equal(a.params[name].data,
                                          b.params[name].data)
        assert any((a.params[n].data != c.params[n].data).any()
                   for n in a.params if n.endswith("w"))
        np.testing.assert_array_equal(a.params["rpn.cls_b"].data, FOCAL_BIAS)
        np.testing.assert_array_equal(a.params["refine.cls_b"].data, FOCAL_BIAS)
        np.testing.assert_array_equal(a.params["backbone.c1_b"].data, 0.0)
        assert abs(a.params["rpn.cls_w"].data.std() - 0.01) < 0.01

    def test_validation(self):
        odd = PipelineConfig().replace(
            grid=PillarGridSpec(0.0, 7.5, -4.0, 4.0, 0.5, 0.5, 8, 64))
        with pytest.raises(ValueError, match="stride"):
            Detector(odd, {0: (1.8, 4.2, 1.6)}, {0: 0.8})
        with pytest.raises(ValueError, match="disagree"):
            Detector(tiny_cfg(), {0: (1.8, 4.2, 1.6)}, {1: 0.8})
        with pytest.raises(ValueError, match="anchor class"):
            Detector(tiny_cfg(), {}, {})
        good = make_detector()
        bad_params = dict(good.params)
        bad_params.pop("pfn.w")
        with pytest.raises(ValueError, match="parameter set"):
            Detector(tiny_cfg(), {0: (1.8, 4.2, 1.6)}, {0: 0.8},
                     params=bad_params)


class TestForward:
    def test_staged_shapes(self):
        det = make_detector()
        cloud = random_cloud()
        feats, coords = det.pillar_features(cloud, seed=5)
        assert feats.shape[0] == 8 and feats.shape[1] == coords.shape[0]
        image = det.pseudo_image(feats, coords)
        assert image.shape == (8, 16, 16)
        fmap = det.backbone(image)
        assert fmap.shape == (8, 8, 8)
        cls1, reg1, dir1 = det.rpn_heads(fmap)
        a = len(det.anchors)
        assert cls1.shape == (a,) and reg1.shape == (a, 7)
        assert dir1.shape == (a, 2)

    def test_feature_map_composes(self):
        det = make_detector()
        cloud = random_cloud()
        feats, coords = det.pillar_features(cloud, seed=5)
        direct = det.backbone(det.pseudo_image(feats, coords))
        np.testing.assert_array_equal(det.feature_map(cloud, 5).data,
                                      direct.data)

    def test_propose_and_flatten(self):
        det = make_detector()
        fmap = det.feature_map(random_cloud(), 3)
        cls1, reg1, _ = det.rpn_heads(fmap)
        per_class = det.propose_per_class(cls1.data, reg1.data)
        assert [cid for cid, _ in per_class] == [0]
        boxes, cids, scores = det.flatten_proposals(per_class)
        assert len(boxes) == len(cids) == len(scores)
        assert 1 <= len(boxes) <= 16
        assert (np.diff(scores) <= 1e-12).all()
        np.testing.assert_array_equal(cids, 0)

    def test_stage2_prep_poi(self):
        det = make_detector()
        boxes = np.array([[4.0, 0.0, 0.8, 1.8, 4.2, 1.6, 0.3],
                          [6.0, 2.0, 0.8, 1.8, 4.2, 1.6, -1.0]])
        prep = det.stage2_prep(boxes)
        assert prep["positions"].shape == (2, 9, 2)
        assert prep["vis"].shape == (2, 9)
        assert prep["edge_orders"].shape == (2, 4)
        assert set(np.unique(prep["vis"])) <= {0.0, 1.0}
        assert (prep["vis"].sum(axis=1) < 9).all()  # some rows gated

    def test_stage2_prep_visibility_off(self):
        det = make_detector(second_stage=True, poi_pool=True,
                            visibility=False, adaptive=True)
        prep = det.stage2_prep(np.array([[4.0, 0.0, 0.8, 1.8, 4.2, 1.6, 0.0]]))
        np.testing.assert_array_equal(prep["vis"], 1.0)

    def test_stage2_prep_requires_second_stage(self):
        det = make_detector(second_stage=False, poi_pool=False,
                            visibility=False, adaptive=False)
        with pytest.raises(ValueError, match="second stage"):
            det.stage2_prep(np.zeros((1, 7)))

    def test_stage2_features_widths(self):
        boxes = np.array([[4.0, 0.0, 0.8, 1.8, 4.2, 1.6, 0.3]])
        for kwargs, width in [
            (dict(), 40),
            (dict(second_stage=True, poi_pool=False, visibility=False,
                  adaptive=False, rroi="4x4"), 128),
            (dict(second_stage=True, poi_pool=False, visibility=False,
                  adaptive=False, rroi="8x4"), 256),
        ]:
            det = make_detector(**kwargs)
            fmap = det.feature_map(random_cloud(), 1)
            agg = det.stage2_features(fmap, det.stage2_prep(boxes))
            assert agg.shape == (1, width)
            cls2, reg2, dir2 = det.refine_heads(agg)
            assert cls2.shape == (1, 1) and reg2.shape == (1, 7)
            assert dir2.shape == (1, 2)

    def test_stage2_features_empty(self):
        det = make_detector()
        fmap = det.feature_map(random_cloud(), 1)
        agg = det.stage2_features(fmap, det.stage2_prep(np.zeros((0, 7))))
        assert agg.shape == (0, 40)


class TestCheckpoint:
    def test_round_trip_params_and_config(self, tmp_path):
        det = make_detector(seed=3)
        path = tmp_path / "model.ifk"
        det.save(path)
        back = Detector.load(path)
        assert set(back.params) == set(det.params)
        for name in det.params:
            np.testing.assert_array_equal(back.params[name].data,
                                          det.params[name].data)
        assert back.class_ids == det.class_ids
        assert back.anchor_sizes == det.anchor_sizes
        assert back.anchor_z == det.anchor_z
        assert back.grid == det.grid
        assert back.model == det.model
        assert back.switches == det.switches
        assert back.cfg.proposals == det.cfg.proposals
        assert back.cfg.infer == det.cfg.infer

    def test_resave_byte_identical(self, tmp_path):
        det = make_detector(seed=4)
        p1, p2 = tmp_path / "a.ifk", tmp_path / "b.ifk"
        det.save(p1)
        Detector.load(p1).save(p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_rroi_mode_round_trip(self, tmp_path):
        det = make_detector(second_stage=True, poi_pool=False,
                            visibility=False, adaptive=False, rroi="8x4")
        path = tmp_path / "r.ifk"
        det.save(path)
        back = Detector.load(path)
        assert back.switches.rroi == "8x4"
        assert back.stage2_width() == 256

    def test_version_check(self, tmp_path):
        det = make_detector()
        path = tmp_path / "v.ifk"
        det.save(path)
        record = load_checkpoint(path)
        record["meta.format_version"] = np.array([99.0])
        save_checkpoint(record, path)
        with pytest.raises(ValueError, match="format"):
            Detector.load(path)

    def test_inference_identical_after_reload(self, tmp_path):
        from poidet.pipeline.infer import detect_scene
        det = make_detector(seed=6)
        path = tmp_path / "m.ifk"
        det.save(path)
        back = Detector.load(path)
        cloud = random_cloud(seed=9)
        a = detect_scene(det, cloud, pillar_seed=2)
        b = detect_scene(back, cloud, pillar_seed=2)
        assert len(a) == len(b)
        for (b7a, ca, sa), (b7b, cb, sb) in zip(a, b):
            np.testing.assert_array_equal(b7a, b7b)
            assert ca == cb and sa == sb
