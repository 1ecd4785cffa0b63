import numpy as np
import pytest

from canvasweave.canvas import CanvasImage
from canvasweave.synthweave import WeaveSpec, generate_weave


@pytest.fixture(scope="session")
def weave_5cm():
    return generate_weave(WeaveSpec(12.12, 13.68, density_jitter=0.01, noise_level=0.05, seed=11), 5, 5, canvas_id="mpret")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_canvas(rng, h, w, resolution=200.0, **kw):
    return CanvasImage(rng.random((h, w)), resolution, **kw)


# --- acceptance summary -------------------------------------------------------------


def pytest_configure(config):
    config._acceptance = {}


@pytest.fixture(scope="session")
def acceptance_log(request):
    return request.config._acceptance


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = getattr(config, "_acceptance", {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(results, key=lambda k: int(k.split("-")[1])):
        ok, detail = results[key]
        terminalreporter.write_line(f"{key} {'PASS' if ok else 'FAIL'}: {detail}")
