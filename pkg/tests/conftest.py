import pytest
import torch

torch.set_num_threads(1)

from styleswap import defaults
from styleswap.checkpoint import load_model
from styleswap.toytrain import generate_dataset
from styleswap.unet import build_model


@pytest.fixture(scope="session")
def schedule():
    return defaults.default_schedule()


@pytest.fixture(scope="session")
def untrained_model():
    """Default-architecture model with deterministic init and zero output conv."""
    model = build_model(defaults.DEFAULT_MODEL_SPEC)
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model


@pytest.fixture(scope="session")
def trained_model():
    if not defaults.MODEL_ASSET.exists():
        pytest.fail(
            f"missing committed model checkpoint {defaults.MODEL_ASSET}; "
            "train it with: styleswap train --out src/styleswap/assets/model.ckpt"
        )
    model, _ = load_model(defaults.MODEL_ASSET)
    for p in model.parameters():
        p.requires_grad_(False)
    return model


@pytest.fixture(scope="session")
def gate_dataset():
    return generate_dataset(defaults.GATE_DATASET)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    # read the module instance pytest actually executed (a fresh import here
    # would see an empty list)
    import sys

    for name, module in sys.modules.items():
        if name.rpartition(".")[2] != "test_acceptance":
            continue
        lines = getattr(module, "ACCEPTANCE_LINES", None)
        if lines:
            terminalreporter.write_sep("=", "acceptance criteria")
            for line in lines:
                terminalreporter.write_line(line)
            return
