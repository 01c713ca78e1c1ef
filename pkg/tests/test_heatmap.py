"""Input-gradient evidence maps, overlays, pointing game."""

import numpy as np
import pytest
from PIL import Image

from conftest import bias_model, const_pre, probe_model
from retscreen.ensemble import Ensemble
from retscreen.heatmap import (EvidenceMap, input_gradient_map,
                               model_gradient_map, overlay_green,
                               pointing_game_hit, save_map_png16)
from retscreen.micro_cnn import MicroCnnConfig, init_model
from retscreen.preprocess import PreprocessedImage, RawImage


def random_model(seed=0, size=16, n_classes=2, stages=2):
    head = "binary" if n_classes == 2 else "multiclass"
    cfg = MicroCnnConfig(input_size=size, stage_count=stages, base_channels=4,
                         head=head, n_classes=n_classes, seed=seed,
                         initial_learning_rate=0.1)
    return init_model(cfg)


def random_pre(seed=1, size=16):
    rng = np.random.default_rng(seed)
    return PreprocessedImage(tensor=rng.normal(size=(3, size, size)).astype(np.float32),
                             source_id="t", fov_bbox=(0, 0, size, size))


class TestInputGradientMap:
    def test_all_zero_model_gives_zero_map(self):
        model = random_model()
        for t in model.parameters.values():
            t.values[:] = 0.0
        emap = input_gradient_map(model, random_pre())
        np.testing.assert_array_equal(emap.values, 0.0)

    def test_range_and_max_normalization(self):
        emap = input_gradient_map(random_model(seed=3), random_pre(seed=4))
        assert emap.values.min() >= 0.0
        assert emap.values.max() == pytest.approx(1.0)
        assert emap.values.shape == (16, 16)

    def test_multiclass_head_uses_expected_grade(self):
        emap = input_gradient_map(random_model(seed=5, n_classes=5),
                                  random_pre(seed=6))
        assert emap.values.max() == pytest.approx(1.0)

    def test_mirror_equivariance(self):
        # mirroring every conv kernel and the input mirrors the map
        model = random_model(seed=7)
        pre = random_pre(seed=8)
        mirrored = model.clone()
        for name, t in mirrored.parameters.items():
            if "conv" in name and name.endswith("weight"):
                t.values = t.values[:, :, :, ::-1].copy()
        m_pre = PreprocessedImage(tensor=pre.tensor[:, :, ::-1].copy(),
                                  source_id="t", fov_bbox=pre.fov_bbox)
        base = model_gradient_map(model, pre)
        flipped = model_gradient_map(mirrored, m_pre)
        np.testing.assert_allclose(flipped, base[:, ::-1], atol=1e-5)

    def test_ensemble_mean_before_normalization(self):
        m1 = random_model(seed=9, size=8, stages=1)
        m2 = random_model(seed=10, size=16, stages=1)
        e = Ensemble([m1, m2])
        pre = {8: random_pre(seed=11, size=8), 16: random_pre(seed=12, size=16)}
        emap = input_gradient_map(e, pre)
        assert emap.values.shape == (16, 16)
        assert emap.values.max() == pytest.approx(1.0)

    def test_ensemble_missing_size_rejected(self):
        e = Ensemble([random_model(seed=13, size=8, stages=1)])
        with pytest.raises(KeyError):
            input_gradient_map(e, {16: random_pre(size=16)})

    def test_evidence_map_value_validation(self):
        with pytest.raises(ValueError, match="\\[0, 1\\]"):
            EvidenceMap(values=np.full((4, 4), 1.5, dtype=np.float32))


class TestOverlay:
    def _raw(self, value=100, h=24, w=24):
        return RawImage(np.full((h, w, 3), value, dtype=np.uint8))

    def test_zero_map_identity(self):
        raw = self._raw()
        emap = EvidenceMap(values=np.zeros((12, 12), dtype=np.float32))
        out = overlay_green(raw, emap, tau=0.5)
        np.testing.assert_array_equal(out.values, raw.values)

    def test_tau_zero_all_ones_saturates_green_in_box(self):
        raw = self._raw()
        emap = EvidenceMap(values=np.ones((12, 12), dtype=np.float32))
        out = overlay_green(raw, emap, tau=0.0, bbox=(4, 4, 20, 20))
        assert (out.values[4:20, 4:20, 1] == 255).all()
        assert (out.values[:4, :, 1] == 100).all()

    def test_red_blue_never_modified(self):
        rng = np.random.default_rng(14)
        raw = RawImage(rng.integers(0, 255, size=(20, 20, 3)).astype(np.uint8))
        emap = EvidenceMap(values=rng.uniform(size=(10, 10)).astype(np.float32))
        out = overlay_green(raw, emap, tau=0.2)
        np.testing.assert_array_equal(out.values[:, :, 0], raw.values[:, :, 0])
        np.testing.assert_array_equal(out.values[:, :, 2], raw.values[:, :, 2])

    def test_blend_weight_proportional_to_map(self):
        raw = self._raw(value=55)
        values = np.zeros((24, 24), dtype=np.float32)
        values[0, 0] = 1.0
        values[12, 12] = 0.6
        emap = EvidenceMap(values=values)
        out = overlay_green(raw, emap, tau=0.5)
        assert out.values[0, 0, 1] == 255
        assert out.values[12, 12, 1] == round(55 + 0.6 * 200)

    def test_bad_bbox_rejected(self):
        raw = self._raw()
        emap = EvidenceMap(values=np.zeros((4, 4), dtype=np.float32))
        with pytest.raises(ValueError, match="does not fit"):
            overlay_green(raw, emap, bbox=(0, 0, 30, 30))

    def test_tau_out_of_range(self):
        raw = self._raw()
        emap = EvidenceMap(values=np.zeros((4, 4), dtype=np.float32))
        with pytest.raises(ValueError, match="tau"):
            overlay_green(raw, emap, tau=1.5)


class TestPointingGame:
    def test_hit_inside_dilated_mask(self):
        mask = np.zeros((30, 30), dtype=np.uint8)
        mask[10, 10] = 255
        emap = np.zeros((30, 30))
        emap[14, 10] = 1.0  # 4 px away, within 5 px dilation
        assert pointing_game_hit(emap, mask, dilation_px=5)

    def test_miss_outside_dilation(self):
        mask = np.zeros((30, 30), dtype=np.uint8)
        mask[10, 10] = 255
        emap = np.zeros((30, 30))
        emap[25, 25] = 1.0
        assert not pointing_game_hit(emap, mask, dilation_px=5)

    def test_empty_mask_is_no_hit(self):
        assert not pointing_game_hit(np.ones((8, 8)), np.zeros((8, 8)))

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError, match="does not match"):
            pointing_game_hit(np.ones((8, 8)), np.ones((9, 9)))


class TestMapIo:
    def test_png16_roundtrip(self, tmp_path):
        rng = np.random.default_rng(15)
        values = rng.uniform(size=(16, 16)).astype(np.float32)
        values /= values.max()
        emap = EvidenceMap(values=values)
        path = tmp_path / "map.png"
        save_map_png16(emap, path)
        back = np.asarray(Image.open(path))
        assert back.dtype == np.uint16 or back.max() > 255
        np.testing.assert_allclose(back / 65535.0, values, atol=1e-4)
