"""Shared fixtures: tiny on-disk datasets reused across harness/CLI tests."""

import pytest

from fusedet import synthdata as sd
from fusedet.harness import SceneBatch


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """8 train + 4 val scenes at 64x64; session-scoped, read-only."""
    root = tmp_path_factory.mktemp("data")
    sd.generate_dataset(root, "train", 8, 7)
    sd.generate_dataset(root, "val", 4, 900)
    return root


@pytest.fixture(scope="session")
def train_batch(tiny_dataset):
    return SceneBatch.from_dir(tiny_dataset, "train")


@pytest.fixture(scope="session")
def val_batch(tiny_dataset):
    return SceneBatch.from_dir(tiny_dataset, "val")
