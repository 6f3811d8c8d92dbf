"""Shared fixtures: a Gaussian-error AR(1) model and small datasets."""

import numpy as np
import pytest

from subsampling_mcmc.models import AR1Model, AR1StudentT, DataSet, generate_ar1


class AR1Gaussian(AR1Model):
    """AR(1) with standard normal errors; its log-density is quadratic in ``z``."""

    _log_norm = -0.5 * np.log(2.0 * np.pi)

    def _logpdf(self, eps):
        return self._log_norm - 0.5 * eps * eps

    def _dlogpdf(self, eps):
        return -eps

    def _d2logpdf(self, eps):
        return -np.ones_like(eps)

    def sample_errors(self, rng, size):
        return rng.standard_normal(size)


@pytest.fixture
def gaussian_model():
    return AR1Gaussian("M1")


@pytest.fixture
def t_model():
    return AR1StudentT("M1", nu=5.0)


@pytest.fixture
def small_data(t_model):
    return generate_ar1(200, t_model, (0.3, 0.6), seed=7)


@pytest.fixture
def gaussian_data():
    rng = np.random.default_rng(3)
    y = np.zeros(300)
    for t in range(1, y.size):
        y[t] = 0.3 + 0.6 * y[t - 1] + rng.standard_normal()
    return DataSet(y)


# ---------------------------------------------------------------- acceptance report

_REPORT = pytest.StashKey[list]()


class _Criterion:
    def __init__(self, lines):
        self._lines = lines
        self.number = None
        self.title = None
        self.done = False

    def start(self, number, title):
        self.number, self.title = number, title

    def finish(self, ok, detail):
        self._lines.append((self.number, f"criterion {self.number:2d}: {'PASS' if ok else 'FAIL'}"
                                         f"  {self.title}  [{detail}]"))
        self.done = True
        print(self._lines[-1][1])
        assert ok, detail


@pytest.fixture
def criterion(request):
    """Records one PASS/FAIL line per acceptance criterion."""
    lines = request.config.stash.setdefault(_REPORT, [])
    rec = _Criterion(lines)
    yield rec
    if rec.number is not None and not rec.done:
        lines.append((rec.number, f"criterion {rec.number:2d}: FAIL  {rec.title}  [raised an error]"))


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_REPORT, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
