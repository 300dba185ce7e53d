import numpy as np
import pytest

from ukast.data import SynthSpec, generate, save_dataset


@pytest.fixture(scope="session")
def micro_dataset_dir(tmp_path_factory):
    """Small 32x32 two-class dataset shared by CLI/acceptance tests."""
    path = tmp_path_factory.mktemp("data") / "synth"
    spec = SynthSpec(train_count=8, test_count=2, size=32, classes=2)
    save_dataset(path, generate(spec, seed=5))
    return str(path)
