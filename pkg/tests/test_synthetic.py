import json
import math

import numpy as np
import pytest
import torch
from conftest import oracle_model

from regionvlp.alignment import compute_bundle, total_loss
from regionvlp.dataset_io import read_dataset
from regionvlp.encoders import RegionVLP
from regionvlp.synthetic import (
    brute_force_bundle,
    brute_force_info_nce,
    brute_force_losses,
    generate_planted_dataset,
    planted_alignment_accuracy,
    planted_model_config,
    read_truth,
    write_planted,
)


class TestPlantedData:
    def test_zero_noise_regions_are_concepts(self):
        p = generate_planted_dataset(noise_sigma=0.0, seed=2)
        for entry in p.train.manifest.videos:
            feats = p.train.regions[entry.video_id].features
            ids = p.truth[entry.video_id]["region_words"]
            inv = {v: k for k, v in p.train.vocab.items()}
            concepts = [int(inv[i][len("concept"):]) for i in ids]
            np.testing.assert_array_equal(feats, p.concepts[concepts].astype(np.float32))

    def test_same_seed_same_data(self, tmp_path):
        write_planted(tmp_path / "a", generate_planted_dataset(seed=4))
        write_planted(tmp_path / "b", generate_planted_dataset(seed=4))
        for f in sorted((tmp_path / "a").rglob("*")):
            if f.is_file():
                assert f.read_bytes() == (tmp_path / "b" / f.relative_to(tmp_path / "a")).read_bytes()

    @pytest.mark.parametrize(
        "kwargs", [dict(n_concepts=5, n=8), dict(l=4, n=5), dict(b_train=1), dict(noise_sigma=-0.1)]
    )
    def test_inconsistent_parameters(self, kwargs):
        with pytest.raises(ValueError):
            generate_planted_dataset(**kwargs)

    def test_captions_hold_concepts_and_fillers(self):
        p = generate_planted_dataset(seed=0)
        for k, entry in enumerate(p.test.manifest.videos):
            ids = p.test.caption(k).token_ids[1:]
            assert len(ids) == 10
            assert sorted(set(ids) & set(p.truth[entry.video_id]["region_words"])) == sorted(
                p.truth[entry.video_id]["region_words"]
            )

    def test_concepts_nearly_orthogonal_at_d64(self):
        p = generate_planted_dataset(d=64, n_concepts=40, seed=0)
        c = p.concepts @ p.concepts.T
        off = c[~np.eye(len(c), dtype=bool)]
        assert abs(off.mean()) < 0.1
        np.testing.assert_allclose(np.diag(c), 1.0)

    def test_written_set_reads_back(self, tmp_path):
        p = generate_planted_dataset(seed=1, num_frames=3)
        write_planted(tmp_path, p)
        for split in ("train", "test"):
            ds = read_dataset(tmp_path / split)
            assert len(ds) == len(getattr(p, split))
        assert read_truth(tmp_path / "truth.json") == json.loads(json.dumps(p.truth))


class TestBruteForce:
    def test_uniform_attention_zero(self):
        r = torch.tensor([[[0.0, 1.0], [0.0, 1.0], [0.0, 2.0]], [[0.0, 1.0], [0.0, 1.0], [0.0, 1.0]]])
        t = torch.tensor([[[1.0, 0.0], [1.0, 0.0], [1.0, 0.0]], [[1.0, 0.0], [1.0, 0.0], [1.0, 0.0]]])
        b = brute_force_bundle(r, t, [2, 2], [2, 2])
        assert b.local_v2l.abs().max() == 0 and b.local_l2v.abs().max() == 0
        fast = compute_bundle(r.double(), t.double(), torch.ones(2, 2, dtype=torch.bool), torch.ones(2, 2, dtype=torch.bool))
        assert fast.local_v2l.abs().max() == 0 and fast.local_l2v.abs().max() == 0

    def test_hand_checked_pair(self):
        cls = [1.0, 1.0]
        r = [[cls, [1.0, 0.0]], [cls, [0.0, 1.0]]]
        t = [[cls, [1.0, 0.0], [0.0, 1.0]], [cls, [0.0, 1.0], [0.0, 1.0]]]
        b = brute_force_bundle(r, t, [1, 1], [2, 2])
        # region [1,0] keeps only word [1,0] after refinement
        assert float(b.local_v2l[0, 0]) == pytest.approx(1.0)
        # one region: both words attend to it fully, scoring cos 1 and cos 0
        assert float(b.local_l2v[0, 0]) == pytest.approx(0.5)
        assert float(b.global_sim[0, 1]) == pytest.approx(1.0)

    def test_info_nce_closed_forms(self):
        assert brute_force_info_nce([[0.0, 0.0], [0.0, 0.0]], 0.5) == pytest.approx(math.log(2))
        s = [[10.0, -10.0], [-10.0, 10.0]]
        assert brute_force_info_nce(s, 1.0) == pytest.approx(-math.log(math.exp(10) / (math.exp(10) + math.exp(-10))))

    def test_losses_match_fast_path(self):
        g = torch.Generator().manual_seed(0)
        r = torch.randn(3, 4, 5, generator=g, dtype=torch.float64)
        t = torch.randn(3, 6, 5, generator=g, dtype=torch.float64)
        ones = lambda b, n: torch.ones(b, n, dtype=torch.bool)  # noqa: E731
        fast_total, fast_terms = total_loss(compute_bundle(r, t, ones(3, 3), ones(3, 5)), 0.07)
        slow = brute_force_losses(brute_force_bundle(r, t, [3] * 3, [5] * 3), 0.07)
        assert float(fast_total) == pytest.approx(slow["total"], abs=1e-9)
        for name, value in fast_terms.items():
            assert float(value) == pytest.approx(slow[name], abs=1e-9)


class TestAlignmentAccuracy:
    def test_oracle_model_is_perfect(self):
        p = generate_planted_dataset(noise_sigma=0.0, seed=5)
        assert planted_alignment_accuracy(oracle_model(p), p.test, p.truth) == 100.0

    def test_untrained_is_near_chance(self):
        p = generate_planted_dataset(seed=0)
        acc = [planted_alignment_accuracy(RegionVLP(planted_model_config(p), seed=s), p.test, p.truth) for s in range(20)]
        assert 7 <= np.mean(acc) <= 13  # chance is 100 / L = 10

    def test_multi_frame_uses_source_indices(self):
        p = generate_planted_dataset(noise_sigma=0.0, seed=6, num_frames=4)
        assert planted_alignment_accuracy(oracle_model(p), p.test, p.truth, num_frames=4) == 100.0
