import numpy as np
import pytest

from lowbit_emotion.data import SyntheticSpec, gen_synthetic


def textured(seed=0, size=96):
    """Smooth random texture plus edges; stands in for a natural image."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size] / size
    img = 0.5 + 0.2 * np.sin(2 * np.pi * (3 * xx + 2 * yy)) + 0.1 * np.cos(2 * np.pi * 7 * xx * yy)
    img += 0.15 * ((xx - 0.5) ** 2 + (yy - 0.4) ** 2 < 0.08)
    img += 0.03 * rng.normal(size=img.shape)
    return np.clip(img, 0, 1)


@pytest.fixture(scope="session")
def small_corpus():
    return gen_synthetic(SyntheticSpec(n_sequences=4, frames_per_sequence=12, seed=5))


# one line per acceptance criterion, echoed in the terminal summary so the
# verdicts survive output capturing
ACCEPTANCE_LINES: list[str] = []


def report_criterion(number: int, ok: bool, detail: str) -> None:
    line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    print(line)
    ACCEPTANCE_LINES.append(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
