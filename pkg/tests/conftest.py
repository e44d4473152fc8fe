import numpy as np
import pytest
import torch

from regionvlp.dataset_io import normalize_box
from regionvlp.datamodel import RegionRecord
from regionvlp.synthetic import generate_planted_dataset

torch.set_num_threads(1)


def region(x1=0.1, y1=0.2, x2=0.5, y2=0.6, conf=0.9, frame=0, d=4, seed=0):
    feat = np.random.default_rng(seed).standard_normal(d)
    return RegionRecord(feat, normalize_box((x1, y1, x2, y2), 1.0, 1.0), conf, frame)


@pytest.fixture
def make_region():
    return region


@pytest.fixture(scope="session")
def small_planted():
    """A small planted dataset shared by tests that only need valid data."""
    return generate_planted_dataset(b_train=8, b_test=6, n=3, l=5, d=8, n_concepts=6, seed=3, num_frames=2)


def oracle_model(planted):
    """A model that is perfectly trained on a planted set by construction.

    Zero transformer layers make both encoders the identity on their inputs;
    every concept word embeds to its concept vector and filler words to 0.
    """
    import torch

    from regionvlp.encoders import RegionVLP
    from regionvlp.synthetic import planted_model_config

    model = RegionVLP(planted_model_config(planted, video_layers=0, text_layers=0))
    with torch.no_grad():
        model.text.token_embedding.weight.zero_()
        for word, idx in planted.train.vocab.items():
            if word.startswith("concept"):
                c = int(word[len("concept"):])
                model.text.token_embedding.weight[idx] = torch.as_tensor(planted.concepts[c], dtype=torch.float32)
    return model.eval()
