import numpy as np
import pytest

from cuboidlift import dataset as ds


@pytest.fixture(scope="session")
def tiny_dataset_dir(tmp_path_factory):
    """Small generated dataset shared by loader/training tests."""
    out = tmp_path_factory.mktemp("tiny_data")
    ds.generate_to_dir(str(out), seed=21, spec=ds.SampleSpec(), base_count=60,
                       augment_factor=10, unlabeled_count=120)
    return str(out)


@pytest.fixture(scope="session")
def tiny_train_data(tiny_dataset_dir):
    return ds.load_training_data(tiny_dataset_dir, noise_sigma_px=0.5, seed=3)
