import numpy as np
import pytest

from svdti.core import DwiVolume, GradientScheme

# One line per acceptance criterion, printed after the run so the verdicts
# survive pytest's output capture.
ACCEPTANCE_RESULTS = []


def record_criterion(number: int, description: str, ok: bool, detail: str = ""):
    status = "PASS" if ok else "FAIL"
    suffix = f" ({detail})" if detail else ""
    ACCEPTANCE_RESULTS.append(
        f"[criterion {number:02d}] {status} - {description}{suffix}"
    )
    return ok


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.write_line("")
    terminalreporter.write_line("acceptance criteria:")
    for line in ACCEPTANCE_RESULTS:
        terminalreporter.write_line(line)


# Six non-collinear directions spanning the symmetric-tensor space well
# (pairwise bisectors of the coordinate axes), the standard minimal set.
_SIX = np.array([
    [1, 1, 0], [1, -1, 0],
    [1, 0, 1], [1, 0, -1],
    [0, 1, 1], [0, 1, -1],
], dtype=np.float64) / np.sqrt(2.0)


@pytest.fixture(scope="session")
def six_dir_scheme() -> GradientScheme:
    bvals = np.concatenate([[0.0], np.full(6, 1000.0)])
    bvecs = np.concatenate([np.zeros((1, 3)), _SIX])
    return GradientScheme(bvals=bvals, bvecs=bvecs)


@pytest.fixture()
def tiny_volume(six_dir_scheme) -> DwiVolume:
    rng = np.random.default_rng(11)
    data = rng.uniform(0.3, 1.0, size=(5, 4, 3, 7))
    mask = np.ones((5, 4, 3), dtype=bool)
    mask[0, 0, 0] = False
    return DwiVolume(data=data, mask=mask, scheme=six_dir_scheme)
