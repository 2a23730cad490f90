import hashlib
import json
import os
import pickle

import numpy as np
import pytest
from hypothesis import settings

from moetta.config import RunConfig
from moetta.pipeline import load_task, train_source
from moetta.vit import ViTConfig, init_params

settings.register_profile("ci", max_examples=25, deadline=None)
settings.register_profile("dev", max_examples=10, deadline=None)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "ci"))

SEEDS = (42, 4242, 424242)


@pytest.fixture(scope="session")
def source_run(request):
    """Default-config source model, trained once and cached across sessions."""
    cfg = RunConfig()
    cache = request.config.cache.mkdir("moetta")
    key = hashlib.sha256(json.dumps(cfg.to_dict(), sort_keys=True).encode()).hexdigest()[:12]
    path = cache / f"source-{key}.pkl"
    train, test = load_task(cfg)
    if path.exists():
        with path.open("rb") as fh:
            model, report = pickle.load(fh)
    else:
        model, report = train_source(cfg, train=train, test=test)
        with path.open("wb") as fh:
            pickle.dump((model, report), fh)
    return cfg, model, report, test


@pytest.fixture
def tiny_config():
    return ViTConfig(image_size=8, channels=3, patch_size=4, embed_dim=16, depth=2, heads=2, mlp_ratio=2, num_classes=5)


@pytest.fixture
def tiny_model(tiny_config):
    return init_params(tiny_config, seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    from . import test_acceptance

    if test_acceptance.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(test_acceptance.RESULTS):
            terminalreporter.write_line(line)
