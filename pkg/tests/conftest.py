import numpy as np
import pytest

from avil.data import MultiMnistSet


@pytest.fixture
def rng():
    return np.random.default_rng(42)


def toy_set(n, seed, tasks=("tl", "br"), split="train", label_map=None):
    """Small random-image dataset; labels can be overridden per task."""
    gen = np.random.default_rng(seed)
    images = gen.uniform(0.0, 1.0, size=(n, 1, 28, 28)).astype(np.float32)
    labels = {}
    for task in tasks:
        if label_map and task in label_map:
            labels[task] = np.asarray(label_map[task], dtype=np.int64)
        else:
            labels[task] = gen.integers(0, 10, size=n)
    return MultiMnistSet(images=images, labels=labels, split=split)
