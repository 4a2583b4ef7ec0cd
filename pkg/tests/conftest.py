import numpy as np
import pytest

from iterpose.backbone import ModelConfig
from iterpose.synthdata import GenConfig, generate_dataset, load_dataset
from iterpose.training import TrainConfig, train_gate, train_progressive


@pytest.fixture(scope="session")
def tiny_path(tmp_path_factory):
    path = tmp_path_factory.mktemp("data") / "tiny.ipd"
    generate_dataset(GenConfig(n=160, size=32, seed=5), path)
    return path


@pytest.fixture(scope="session")
def tiny_data(tiny_path):
    return load_dataset(tiny_path)


@pytest.fixture(scope="session")
def tiny_net(tiny_data):
    """Small model trained just enough to have non-trivial behavior."""
    mcfg = ModelConfig(input_size=32, base_channels=4, loop_point=3, l_max=1,
                       fc_width=32)
    tcfg = TrainConfig(protocol="progressive", epochs_initial=4,
                       epochs_per_loop=2, batch_size=16, seed=9)
    net, opt, log, rng = train_progressive(
        mcfg, tcfg, tiny_data.split("train"), tiny_data.split("val"))
    net._fixture_log = log
    return net


@pytest.fixture(scope="session")
def gated_net(tiny_net, tiny_data):
    import copy
    net = copy.deepcopy(tiny_net)
    tcfg = TrainConfig(batch_size=16, seed=9, gate_epochs=3)
    train_gate(net, tcfg, tiny_data.split("train"),
               per_loop_gflops=0.001, lam=10.0)
    return net


@pytest.fixture
def rng():
    return np.random.default_rng(42)
