import numpy as np
import pytest

from maskcl.data import SyntheticConfig, generate_synthetic
from maskcl.encoder import EncoderConfig
from maskcl.structure import ClusteringConfig
from maskcl.trainer import TrainConfig

TINY_DATA = SyntheticConfig(
    n_persons=4,
    outfits_per_person=2,
    images_per_outfit=3,
    n_cameras=2,
    image_size=(24, 16),
    eval_persons=3,
    seed=11,
)

TINY_TRAIN = TrainConfig(
    epochs=1,
    batch_size=8,
    clusters_per_batch=4,
    instances_per_cluster=2,
    k_max=2,
    seed=3,
    clustering=ClusteringConfig(method="kmeans", n_clusters=6, seed=0),
    encoder=EncoderConfig(feature_dim=16),
)


@pytest.fixture(scope="session")
def tiny_manifest():
    return generate_synthetic(TINY_DATA)


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
