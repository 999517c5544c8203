import numpy as np
import pytest

from flowrecon.grid_fields import GridSpec, ScalarGrid, VectorGrid, curl, divergence, gradient


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def smooth_field(rng, shape, modes=3, lead=()):
    """Random band-limited field built from a few low Fourier modes."""
    X = np.stack(np.meshgrid(*[(np.arange(n) + 0.5) / n for n in shape], indexing="ij"))
    out = np.zeros(lead + tuple(shape))
    for idx in np.ndindex(lead or (1,)):
        f = np.zeros(shape)
        for _ in range(modes):
            k = rng.integers(1, 3, size=3)
            ph = rng.uniform(0, 2 * np.pi, size=3)
            f += rng.normal() * np.prod([np.cos(np.pi * k[a] * X[a] + ph[a]) for a in range(3)], axis=0)
        out[idx if lead else ()] = f
    return out


@pytest.fixture
def spec8():
    return GridSpec.cube(8)


def operator_errors(n):
    spec = GridSpec.cube(n)
    x, y, z = spec.centers()
    k = np.pi
    f = np.sin(k * x) * np.cos(k * y) * np.sin(k * z)
    g_exact = np.stack([k * np.cos(k * x) * np.cos(k * y) * np.sin(k * z),
                        -k * np.sin(k * x) * np.sin(k * y) * np.sin(k * z),
                        k * np.sin(k * x) * np.cos(k * y) * np.cos(k * z)])
    u = np.stack([np.sin(k * y), np.sin(k * z), np.sin(k * x)])
    curl_exact = -k * np.stack([np.cos(k * z), np.cos(k * x), np.cos(k * y)])
    s = (slice(None),) + (slice(1, -1),) * 3
    rms = lambda a: float(np.sqrt(np.mean(a ** 2)))
    eg = rms((gradient(ScalarGrid(spec, f)).data - g_exact)[s])
    ud = np.stack([np.sin(k * x), np.sin(k * y), np.sin(k * z)])
    div_exact = k * (np.cos(k * x) + np.cos(k * y) + np.cos(k * z))
    ed = rms((divergence(VectorGrid(spec, ud)).data - div_exact)[s[1:]])
    ec = rms((curl(VectorGrid(spec, u)).data - curl_exact)[s])
    return eg, ed, ec


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2])):
            terminalreporter.write_line(line)
