import numpy as np
import pytest

from darkflash import sim

# criterion number -> (passed, detail); filled by test_acceptance, printed at session end
ACCEPTANCE: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[num]
        terminalreporter.write_line(f"criterion {num}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def rig():
    return sim.make_rig("ideal")


def flat_scene(h=8, w=8, reflectance=0.5, ambient=None, depth=2.0, bands=sim.BANDS):
    amb = np.full(len(bands), 0.1) if ambient is None else np.asarray(ambient, dtype=float)
    refl = np.full((h, w, len(bands)), reflectance, dtype=float)
    return sim.SpectralScene(refl, np.full((h, w), depth), amb, bands=bands)
