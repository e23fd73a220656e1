import numpy as np
import pytest
import torch
from hypothesis import settings

from dabeam.acoustics import ArrayConfig, PhantomSpec

settings.register_profile("dabeam", deadline=None, max_examples=40)
settings.load_profile("dabeam")

torch.set_num_threads(1)


@pytest.fixture
def small_array():
    return ArrayConfig(num_elements=16, transmit_focus_depth=20e-3)


@pytest.fixture
def small_phantom():
    return PhantomSpec(
        cyst_center=(0.0, 20e-3),
        cyst_diameter=5e-3,
        field_extent=((-6e-3, 6e-3), (14e-3, 26e-3)),
        rng_seed=3,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_run(**overrides):
    """Smallest run that still exercises every stage: one frame per split."""
    from dabeam.config import Splits, small_config
    from dabeam.losses import LossWeights
    from dabeam.training import TrainConfig

    run = small_config()
    run = run.replace(
        splits=Splits(1, 1, 1, 1, 1),
        pipeline=type(run.pipeline)(**dict(vars(run.pipeline), per_class=300, target_per_frame=600)),
        training=TrainConfig(
            weights=LossWeights(), norm="l2", generator_hidden=(32,), discriminator_hidden=(32,),
            regressor_hidden=(32, 32), epochs=1, eval_interval=4, log_interval=2,
        ),
    )
    return run.replace(**overrides) if overrides else run


@pytest.fixture(scope="session")
def tiny_experiment():
    from dabeam.pipeline import prepare

    return prepare(tiny_run())


def pytest_terminal_summary(terminalreporter):
    from . import test_acceptance

    if test_acceptance.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in test_acceptance.RESULTS:
            terminalreporter.write_line(line)
