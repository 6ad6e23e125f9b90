import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from rkto.policy import Context, FeaturizedPolicy, TabularPolicy, Trace
from rkto.synthdata import GenerationConfig, generate_dataset

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

DATA_DIR = os.path.join(os.path.dirname(__file__), "data")


def small_context(F=3, prompt=(2, 3), cls=0, seed=0):
    rng = np.random.default_rng(seed)
    return Context(tuple(rng.standard_normal(F)), tuple(prompt), cls)


@pytest.fixture
def tiny_gen():
    return GenerationConfig(n_examples=40, n_classes=2, feature_dim=3, vocab_size=6, grid_side=2,
                            thinking_len=1, intermediate_len=1, reflection_len=1, output_len=2,
                            prompt_len=1, seed=3)


@pytest.fixture
def tiny_data(tiny_gen):
    return generate_dataset(tiny_gen)


@pytest.fixture
def feat_policy():
    return FeaturizedPolicy(6, 3, embed_dim=3, pos_dim=4, init_scale=0.5, seed=11)


@pytest.fixture
def full_trace():
    return Trace.from_segments(thinking=(2,), intermediate=(3, 4), reflection=(5,), output=(2, 3),
                               mask=(1, 0, 0, 1))


def pytest_terminal_summary(terminalreporter):
    lines = []
    for key in ("passed", "failed"):
        for rep in terminalreporter.stats.get(key, []):
            lines += [v for k, v in getattr(rep, "user_properties", []) if k == "acceptance"]
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
