# pylint: disable=redefined-outer-name
import numpy as np
from pytest import fixture

from tamba.config import Config
from tamba.harness import Harness
from tamba.models.config import DataConfig, GeneratorSpec, ModelConfig, RunConfig
from tamba.tensor import set_profile
from tests import common


@fixture(autouse=True)
def debug_profile():
    """
    Every test starts with NaN/Inf checks enabled, whatever the previous test switched.
    """
    set_profile("debug")
    yield
    set_profile("debug")


@fixture
def rng():
    return np.random.default_rng(common.SEED)


@fixture
def tiny_config():
    return ModelConfig(**common.TINY_MODEL)


@fixture
def tiny_spec():
    return GeneratorSpec(**common.TINY_GENERATOR)


@fixture
def scenario():
    return common.two_agent_scenario()


@fixture
def tiny_run(tiny_config, tiny_spec):
    return RunConfig(
        model=tiny_config,
        data=DataConfig(generator=tiny_spec, n_train=4, n_val=2, n_eval=3),
        batch_size=2,
        epochs=2,
        seed=common.SEED,
    )


@fixture
def harness_maker(tmp_path, tiny_run):
    def maker(run_config=tiny_run, out_dir=None):
        return Harness(run_config, Config(out_dir or tmp_path / "out"))

    return maker
