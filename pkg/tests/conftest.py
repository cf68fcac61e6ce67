import numpy as np
import pytest

from pc_lab.chain import ChainSpec, Parameters


def make_net(seed, dims, acts="tanh", loss="squared-euclidean", bias=False, batch=1,
             bias_scale=0.3):
    """Seeded (params, inputs, targets) for a chain with the given widths."""
    rng = np.random.default_rng(seed)
    spec = ChainSpec(tuple(dims), acts, loss)
    params = Parameters.init(spec, rng, bias=bias, bias_scale=bias_scale if bias else 0.0)
    x = rng.normal(size=(batch, dims[0]))
    if loss == "softmax-cross-entropy":
        t = np.eye(dims[-1])[rng.integers(0, dims[-1], size=batch)]
    else:
        t = rng.normal(size=(batch, dims[-1]))
    return params, x, t


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_ACCEPTANCE = []


@pytest.fixture
def criterion(request):
    """Record a one-line PASS/FAIL verdict for an acceptance criterion."""
    def record(number, name, ok, detail=""):
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {name}  {detail}".rstrip()
        _ACCEPTANCE.append((number, line))
        print(line)
        assert ok, line
    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(_ACCEPTANCE):
            terminalreporter.write_line(line)
