from ..networks import ModelConfig
from ..training import TrainConfig, build_model
from ..vehicle import DatasetConfig, generate_dataset

SMALL_MODEL = ModelConfig(latent_dim=6, embed_dim=3, psi_hidden=(8,), encoder_hidden=(16,), residual_hidden=(16,))
SMALL_TRAIN = TrainConfig(epochs=2, batch_size=32, contraction_sample_count=4)


def small_dataset(segments=6, length=8, seed=0, scenarios=('S1', 'S2', 'S3')):
    return generate_dataset(DatasetConfig(segments=segments, length=length, scenarios=scenarios), seed)


def small_model(dataset=None, config=SMALL_MODEL, train_config=SMALL_TRAIN):
    return build_model(dataset if dataset is not None else small_dataset(), train_config, config)
