import pytest

from vehsearch.config import RunConfig
from vehsearch.data import SynthConfig, generate_synthetic, split_tracks
from vehsearch.train import run_train


@pytest.fixture(scope="session")
def tiny_corpus():
    return generate_synthetic(SynthConfig(seed=7, num_tracks=20, frames_per_track=3))


@pytest.fixture(scope="session")
def tiny_config():
    return RunConfig(epochs=2, batch_size=4, frames_per_track_sample=3, score_batch=16)


@pytest.fixture(scope="session")
def tiny_trained(tiny_corpus, tiny_config, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    train, test = split_tracks(tiny_corpus.tracks, 7, 0.25)
    result = run_train(tiny_config, train, tiny_corpus.store(), output=out)
    return result, train, test, out
