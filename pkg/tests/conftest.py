import numpy as np
import pytest

from maskattack.corpus import make_corpus
from maskattack.diffnet import XVectorClassifier
from maskattack.diffnet.frontend import FrontendConfig
from maskattack.diffnet.model import Checkpoint, ModelConfig, init_parameters

TINY = dict(hidden_dim=24, pooling_dim=48, fc_dims=(24, 24))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_config():
    return ModelConfig(num_speakers=3, frontend=FrontendConfig(), **TINY)


@pytest.fixture(scope="session")
def untrained_model(tiny_config):
    params = init_parameters(tiny_config, seed=3)
    # non-trivial batch-norm statistics so gradient checks exercise them
    r = np.random.default_rng(5)
    for k in params:
        if k.endswith("running_mean"):
            params[k] = (r.standard_normal(params[k].shape) * 0.1).astype(np.float32)
        elif k.endswith("running_var"):
            params[k] = r.uniform(0.5, 2.0, params[k].shape).astype(np.float32)
    return Checkpoint(tiny_config, params, ["a", "b", "c"])


@pytest.fixture(scope="session")
def tiny_corpus():
    return make_corpus(n_speakers=3, n_utterances=8, duration=0.5, seed=11)


@pytest.fixture(scope="session")
def trained_classifier(tiny_corpus):
    est = XVectorClassifier(**TINY, epochs=25, batch_size=8, learning_rate=3e-3, seed=0)
    return est.fit(tiny_corpus.waves, tiny_corpus.labels)


@pytest.fixture(scope="session")
def trained_model(trained_classifier):
    return trained_classifier.checkpoint_
