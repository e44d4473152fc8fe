import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from regionvlp.datamodel import (
    CLS_ID,
    PAD_ID,
    CaptionSample,
    ModelConfig,
    RegionRecord,
    VideoSample,
    location_is_valid,
    validate_sample,
)
from regionvlp.dataset_io import make_batch, normalize_box


class TestRegionValidation:
    def test_consistent_location_is_ok(self, make_region):
        assert validate_sample(make_region()) == []

    def test_area_off_by_half(self, make_region):
        r = make_region()
        loc = r.location.copy()
        loc[6] += 0.5
        bad = RegionRecord(r.feature, loc, r.confidence, r.frame_index)
        assert any("area mismatch" in p for p in validate_sample(bad))

    def test_reports_every_violation(self, make_region):
        r = make_region()
        loc = np.array([0.6, 0.2, 0.5, 0.6, 0.3, 0.4, 0.9])
        bad = RegionRecord(r.feature, loc, 1.5, 0)
        problems = validate_sample(bad)
        joined = " ".join(problems)
        for needle in ("x1 > x2", "width mismatch", "area mismatch", "confidence"):
            assert needle in joined

    def test_arrays_are_read_only(self, make_region):
        r = make_region()
        with pytest.raises(ValueError):
            r.feature[0] = 1.0

    @settings(max_examples=200, deadline=None)
    @given(
        st.lists(
            st.one_of(
                st.floats(allow_nan=True, allow_infinity=True),
                st.integers(-5, 5),
            ),
            min_size=0,
            max_size=9,
        ),
        st.one_of(st.floats(allow_nan=True), st.just(0.5)),
    )
    def test_total_on_malformed_numbers(self, loc, conf):
        """Validation reports and never raises, whatever the numbers."""
        class Loose:
            pass

        r = Loose()
        r.location, r.confidence, r.feature, r.frame_index = loc, conf, loc or [float("nan")], 0
        out = validate_sample(r)
        assert isinstance(out, list)
        v = VideoSample("v", (r,), 1, (0,))
        assert isinstance(validate_sample(v), list)

    @settings(max_examples=200, deadline=None)
    @given(
        st.floats(0, 1), st.floats(0, 1), st.floats(0, 1), st.floats(0, 1),
        st.floats(1, 4000), st.floats(1, 4000),
    )
    def test_normalized_boxes_are_valid(self, a, b, c, e, w, h):
        x1, x2 = sorted((a * w, b * w))
        y1, y2 = sorted((c * h, e * h))
        assert location_is_valid(normalize_box((x1, y1, x2, y2), w, h))


class TestCaptionValidation:
    def test_cls_only_is_empty(self):
        assert "empty caption" in validate_sample(CaptionSample("", (CLS_ID,)))

    def test_pad_inside(self):
        assert "PAD id inside caption" in validate_sample(CaptionSample("a b", (CLS_ID, 5, PAD_ID, 6)))

    def test_missing_cls(self):
        assert "caption does not start with CLS" in validate_sample(CaptionSample("a", (5, 6)))

    def test_valid(self):
        cap = CaptionSample("a b", (CLS_ID, 5, 6))
        assert validate_sample(cap) == []
        assert cap.num_words == 2


class TestVideoValidation:
    def test_region_in_unsampled_frame(self, make_region):
        v = VideoSample("v", (make_region(frame=3),), 5, (0, 1))
        assert any("not sampled" in p for p in validate_sample(v))

    def test_object_num_bound(self, make_region):
        regs = tuple(make_region(frame=0, seed=k) for k in range(4))
        v = VideoSample("v", regs, 2, (0,))
        assert validate_sample(v, object_num=4) == []
        assert validate_sample(v, object_num=3) != []

    def test_frame_slots_rank_sampled_frames(self, make_region):
        regs = (make_region(frame=7), make_region(frame=2), make_region(frame=7))
        v = VideoSample("v", regs, 10, (7, 2))
        assert v.frame_slots() == [1, 0, 1]


class TestBatchMasks:
    @settings(max_examples=30, deadline=None)
    @given(st.lists(st.tuples(st.integers(1, 6), st.integers(1, 7)), min_size=2, max_size=5))
    def test_mask_counts_match_samples(self, sizes):
        pairs = []
        for k, (n, l) in enumerate(sizes):
            regs = tuple(
                RegionRecord(np.ones(4), normalize_box((0, 0, 1, 1), 1, 1), 0.5, 0) for _ in range(n)
            )
            pairs.append((VideoSample(f"v{k}", regs, 1, (0,)), CaptionSample("x", (CLS_ID,) + (5,) * l)))
        b = make_batch(pairs)
        n_max, l_max = max(n for n, _ in sizes), max(l for _, l in sizes)
        assert b.features.shape == (len(sizes), n_max, 4)
        assert b.token_ids.shape == (len(sizes), l_max + 1)
        for row, (n, l) in enumerate(sizes):
            assert int(b.region_pad_mask[row].sum()) == n
            assert int(b.word_pad_mask[row].sum()) == l + 1
            assert torch.all(b.token_ids[row, l + 1 :] == PAD_ID)

    def test_single_pair_rejected(self, make_region):
        pair = (VideoSample("v", (make_region(),), 1, (0,)), CaptionSample("a", (CLS_ID, 5)))
        with pytest.raises(ValueError, match="contrastive batch too small"):
            make_batch([pair])


class TestModelConfig:
    def test_desk_defaults(self):
        c = ModelConfig.desk()
        assert (c.d, c.video_layers, c.text_layers, c.heads) == (32, 2, 2, 4)
        assert c.sigma == 0.05

    def test_full_preset(self):
        c = ModelConfig.full()
        assert (c.d, c.video_layers, c.text_layers, c.heads) == (768, 12, 6, 12)

    @pytest.mark.parametrize("kwargs", [dict(d=30, heads=4), dict(sigma=0.0), dict(sigma=-1.0), dict(video_layers=-1)])
    def test_invalid(self, kwargs):
        with pytest.raises(ValueError):
            ModelConfig(**kwargs)

    def test_dict_round_trip(self):
        c = ModelConfig(d=16, heads=2, sigma=0.2, use_refinement=False)
        assert ModelConfig.from_dict(c.to_dict()) == c
