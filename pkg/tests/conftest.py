import numpy as np
import pytest
import torch


@pytest.fixture(scope="session")
def extractor16():
    """Frozen feature extractor for FID at resolution 16 (trained once)."""
    from mpgan import evaluate

    torch.manual_seed(1234)
    model, accuracy = evaluate.train_feature_extractor(16, np.random.default_rng(1234))
    assert accuracy >= 0.9, f"feature extractor only reached {accuracy}"
    model.eval()
    return model


@pytest.fixture(scope="session")
def chair_shapes16():
    """200 reference chair grids at resolution 16."""
    from mpgan import datagen

    return np.stack([
        datagen.sample_shape("chair", 16, np.random.default_rng([900, i]))
        for i in range(200)
    ])
