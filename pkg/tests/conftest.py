import numpy as np
import pytest

from sfal.models import double_well, ou_lin, periodic_weak

_CRITERIA: list[str] = []


def record_criterion(line: str) -> None:
    print(line)
    _CRITERIA.append(line)


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_CRITERIA, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture
def ou():
    return ou_lin()


@pytest.fixture
def dw():
    return double_well()


@pytest.fixture
def pw():
    return periodic_weak()


def zero_model(n=1, m=1, d=1, x0=(0.5,), y0=(0.0,)):
    """All coefficients identically zero."""
    from sfal.models import DissipativityParams, ModelSpec

    return ModelSpec(
        model_id="zero", n=n, m=m, d=d,
        b=lambda t, x, y: np.zeros((len(x), n)),
        sigma=lambda t, x, y: np.zeros((len(x), n, d)),
        f=lambda t, x, y: np.zeros((len(x), m)),
        dissipativity=DissipativityParams(1.0, 1.0, 1.0, 1.0),
        sigma_y_independent=True, x0=list(x0), y0=list(y0),
    )
