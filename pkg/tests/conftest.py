import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("suite", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("suite")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_config():
    from uncer.decoder import DecoderConfig

    return DecoderConfig(n_channels=6, n_samples=32, n_classes=3, temporal_filters=2, depth_multiplier=2,
                         pointwise_filters=4, temporal_kernel=8, pool_size=4)


@pytest.fixture(scope="session")
def small_model(small_config):
    """Untrained decoder with perturbed batchnorm statistics (so eval mode is not trivial)."""
    from uncer.decoder import build_decoder
    from uncer.rng import RngStream

    model = build_decoder(small_config, RngStream(5))
    r = np.random.default_rng(3)
    for name in list(model.buffers):
        if name.endswith("running_mean"):
            model.buffers[name] = r.normal(0, 0.2, model.buffers[name].shape)
        elif name.endswith("running_var"):
            model.buffers[name] = r.uniform(0.5, 2.0, model.buffers[name].shape)
    model.eval()
    return model


ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def criterion(request):
    """``criterion(number, ok, detail)`` records one PASS/FAIL line and fails the test when not ok."""
    lines = request.config.stash.setdefault(ACCEPTANCE, [])

    def report(number, ok, detail):
        line = f"criterion {number:2d} {'PASS' if ok else 'FAIL'}: {detail}"
        lines.append((number, line))
        print(line)
        assert ok, line

    return report


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE, [])
    if lines:
        terminalreporter.write_sep("=", "acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
