import numpy as np
import pytest
import torch

from opre.learning import TrajectoryBatch
from opre.models import LSTMState, ObsBatch, OpreConfig

SMALL = OpreConfig(num_options=4, mlp_sizes=(8, 8), lstm_size=6, head_hidden=5, q_embed=4, q_hidden=4)


def random_obs(rng, shape):
    return ObsBatch.from_numpy(
        rng.integers(0, 6, size=shape + (16,)),
        rng.integers(1, 6, size=shape + (3,)),
        rng.integers(0, 4, size=shape),
    )


def random_batch(T=4, B=3, num_opponents=1, seed=0, hidden=SMALL.lstm_size, dtype=torch.float64, episode_breaks=True):
    rng = np.random.default_rng(seed)
    first = np.zeros((T + 1, B))
    done = np.zeros((T, B))
    if episode_breaks and T > 2:
        done[1, 0] = 1
        first[2, 0] = 1
    return TrajectoryBatch(
        obs=random_obs(rng, (T + 1, B)),
        concealed=random_obs(rng, (T + 1, B, num_opponents)),
        first=torch.tensor(first, dtype=dtype),
        actions=torch.tensor(rng.integers(0, 8, size=(T, B))),
        behaviour_prob=torch.tensor(rng.uniform(0.05, 0.5, size=(T, B)), dtype=dtype),
        rewards=torch.tensor(rng.normal(0, 50, size=(T, B)), dtype=dtype),
        done=torch.tensor(done, dtype=dtype),
        init_state=LSTMState(
            torch.tensor(rng.normal(size=(B, hidden)), dtype=dtype),
            torch.tensor(rng.normal(size=(B, hidden)), dtype=dtype),
        ),
    )


@pytest.fixture
def small_config():
    return SMALL


# -- acceptance reporting --------------------------------------------------------

ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record_criterion(number: int, passed: bool, detail: str) -> None:
    ACCEPTANCE[number] = (bool(passed), detail)
    print(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if passed else 'FAIL'}  {detail}")
