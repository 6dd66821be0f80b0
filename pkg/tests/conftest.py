import sys

import numpy as np
import pytest

from nersae.core import AreaSample, SampleData


def random_sample(rng, g=None, n_range=(5, 50), p_b=1, p_w=2, s2a=4.0, s2e=25.0, full_frac=0.0):
    """Random mixed-model sample with known population covariate means."""
    if g is None:
        g = int(rng.integers(5, 31))
    beta = rng.normal(size=1 + p_b + p_w) * 2
    areas = []
    for i in range(g):
        n = int(rng.integers(n_range[0], n_range[1] + 1))
        N = n if rng.random() < full_frac else n + int(rng.integers(1, 4 * n + 1))
        u = np.concatenate([[1.0], rng.normal(size=p_b)])
        x = rng.normal(size=(n, p_w)) + rng.normal(size=p_w)
        alpha = rng.normal() * np.sqrt(s2a)
        y = np.hstack([np.broadcast_to(u, (n, u.size)), x]) @ beta + alpha + rng.normal(size=n) * np.sqrt(s2e)
        xpop = x.mean(axis=0) + rng.normal(size=p_w) * 0.3 if N > n else x.mean(axis=0)
        areas.append(AreaSample(f"a{i}", N, u, x, y, xpop))
    return SampleData(tuple(areas))


def balanced_oneway(rng, g, m, s2a, s2e, mu=3.0):
    areas = []
    for i in range(g):
        y = mu + rng.normal() * np.sqrt(s2a) + rng.normal(size=m) * np.sqrt(s2e)
        areas.append(AreaSample(f"a{i}", 4 * m, [1.0], np.zeros((m, 0)), y))
    return SampleData(tuple(areas))


def anova_reml(sample):
    """Closed-form REML for a balanced one-way layout, truncated at zero."""
    Y = np.array([a.y for a in sample.areas])
    g, m = Y.shape
    means = Y.mean(axis=1)
    msw = ((Y - means[:, None]) ** 2).sum() / (g * (m - 1))
    msb = m * ((means - means.mean()) ** 2).sum() / (g - 1)
    if msb > msw:
        return (msb - msw) / m, msw
    # on the boundary REML pools all deviations about the grand mean
    return 0.0, ((Y - Y.mean()) ** 2).sum() / (g * m - 1)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
