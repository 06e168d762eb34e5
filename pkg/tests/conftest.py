import numpy as np
import pytest


def write_toy_csv(path, n=120, seed=0, header=True):
    """Four features, label from a noisy linear rule; roughly balanced."""
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, 4)) * [3.0, 5.0, 4.0, 2.0] + [0.5, 1.0, -1.0, 0.0]
    score = x[:, 0] / 3 + 0.4 * x[:, 1] / 5 - 0.3 * x[:, 2] / 4 + 0.1 * rng.normal(size=n)
    y = (score < 0).astype(int)
    with open(path, "w") as fh:
        if header:
            fh.write("a,b,c,d,class\n")
        for row, lab in zip(x, y):
            fh.write(",".join(f"{v:.6f}" for v in row) + f",{lab}\n")
    return path


@pytest.fixture
def toy_csv(tmp_path):
    return write_toy_csv(tmp_path / "toy.csv")


# acceptance results, printed as one line per criterion after the run
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=str):
        status, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"criterion {key}: {status}  {detail}")
