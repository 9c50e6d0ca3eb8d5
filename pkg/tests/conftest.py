import numpy as np
import pytest

from latent_timbre.schedule import build_schedule
from latent_timbre.world import MixtureDenoiser, WorldSpec, make_world


@pytest.fixture(scope="session")
def world():
    return make_world()


@pytest.fixture(scope="session")
def world0():
    return make_world(entanglement=0.0)


@pytest.fixture(scope="session")
def small_world():
    return make_world(channels=12, instruments=3, pitches=4, n_timbre=3, n_structure=3, n_shared=3, seed=5)


@pytest.fixture(scope="session")
def schedule():
    return build_schedule(30)


@pytest.fixture(scope="session")
def denoiser(world):
    return MixtureDenoiser(world)


def toy_world(means, tau, instruments=None, pitches=None) -> WorldSpec:
    """WorldSpec from explicit (I, P, C) means; channels split as the caller says."""
    means = np.asarray(means, dtype=float)
    I, P, C = means.shape
    return WorldSpec(
        channels=C,
        instruments=I,
        pitches=P,
        timbre_channels=tuple(instruments or ()),
        structure_channels=tuple(pitches or ()),
        shared_channels=(),
        component_means=means,
        component_std=tau,
    )


_ACCEPTANCE = []


@pytest.fixture
def acceptance_line():
    """Record one PASS/FAIL summary line; printed at the end of the run."""

    def record(number: int, ok: bool, detail: str):
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
        _ACCEPTANCE.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE):
            terminalreporter.write_line(line)
