import numpy as np
import pytest

from rankgate.store import EmbeddingRecord, EmbeddingStore, unit_f32
from rankgate.synth import SynthConfig, generate


def make_record(identity, image, dim=8, seed=None, group="g", capture=1, vector=None):
    """One valid record; vector drawn from the given seed unless supplied."""
    if vector is None:
        rng = np.random.default_rng(seed if seed is not None else hash((identity, image)) % 2**32)
        vector = rng.standard_normal(dim)
    return EmbeddingRecord(
        identity_id=identity,
        image_id=image,
        group=group,
        capture_index=capture,
        vector=unit_f32(np.asarray(vector, dtype=np.float64)),
    )


@pytest.fixture
def small_store():
    """12 identities x 5 images, dim 16, well separated clusters."""
    return generate(
        SynthConfig(
            n_identities=12,
            images_per_identity=5,
            dimension=16,
            within_noise_sigma=0.08,
            rng_seed=11,
        )
    )


@pytest.fixture
def medium_store():
    """50 identities x 5 images, dim 32: big enough for protocol statistics."""
    return generate(
        SynthConfig(
            n_identities=50,
            images_per_identity=5,
            dimension=32,
            within_noise_sigma=0.1,
            rng_seed=7,
        )
    )
