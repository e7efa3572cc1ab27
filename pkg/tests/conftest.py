import numpy as np
import pytest

from lrpae.autonet import LossKind, TrainConfig, build_mlp_autoencoder, train
from lrpae.corruption import ScoreCalibration
from lrpae.datagen import gen_tabular

#: criterion number -> (name, passed, detail); filled by the acceptance suite.
ACCEPTANCE_RESULTS = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(ACCEPTANCE_RESULTS):
        name, ok, detail = ACCEPTANCE_RESULTS[num]
        line = f"criterion {num:2d} [{name}]: {'PASS' if ok else 'FAIL'}"
        if detail:
            line += f" ({detail})"
        terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def tabular_data():
    return gen_tabular(seed=7, n_train=4000, n_val=500, n_test=1000)


@pytest.fixture(scope="session")
def trained_tabular_model(tabular_data):
    """Small dense autoencoder trained well enough that corruptions stand out."""
    model = build_mlp_autoencoder((21, 16, 6, 16, 21), seed=3)
    cfg = TrainConfig(epochs=60, learning_rate=0.1, momentum=0.9, batch_size=64,
                      seed=3, loss=LossKind.L2)
    return train(model, tabular_data.train, cfg, val_data=tabular_data.val)


@pytest.fixture(scope="session")
def tabular_calibration(trained_tabular_model, tabular_data):
    return ScoreCalibration().fit(trained_tabular_model, tabular_data.train)


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
