import numpy as np
import pytest
import torch

from stkd.datahub import SyntheticSpec, generate_synthetic, window
from stkd.model import ModelConfig, build_model, scaled_laplacian
from stkd.training import TrainConfig, train_teacher

SMALL = ((1, 4, 8), (8, 4, 8))
TINY = ((1, 2, 4), (4, 2, 4))


@pytest.fixture(scope="session")
def tiny_data():
    """Six-node synthetic series windowed with M=12, h=9."""
    speed, adj = generate_synthetic(SyntheticSpec(n_nodes=6, n_timesteps=360, seed=0))
    train, val, test = window(speed, 12, 9)
    return {"train": train, "val": val, "test": test, "L": scaled_laplacian(adj.W).L_tilde, "n": 6}


def make_model(data, channels, seed=0):
    torch.manual_seed(seed)
    return build_model(ModelConfig(channels, n_nodes=data["n"]), data["L"])


@pytest.fixture(scope="session")
def tiny_teacher(tiny_data):
    model = make_model(tiny_data, SMALL, seed=1)
    train_teacher(model, tiny_data["train"], tiny_data["val"], TrainConfig(batch_size=32, epochs=3, seed=0))
    return model


@pytest.fixture
def rng():
    return np.random.default_rng(0)


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def record(cid: int, title: str, ok: bool, detail: str = "") -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {cid:>2}: {title}" + (f" -- {detail}" if detail else "")
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)
