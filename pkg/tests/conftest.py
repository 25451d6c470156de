import socket

import numpy as np
import pytest

from metagent.surrogate import ModelSpec, build_model, init_weights


class NetworkAccessError(AssertionError):
    pass


@pytest.fixture(scope="session", autouse=True)
def _no_network():
    """The whole session runs offline, module fixtures included; opening an internet socket fails."""

    def guard(*args, **kwargs):
        raise NetworkAccessError(f"network access attempted: {args!r}")

    real_socket = socket.socket

    class GuardedSocket(real_socket):
        def connect(self, address):
            if self.family in (socket.AF_INET, socket.AF_INET6):
                guard(address)
            return super().connect(address)

        def connect_ex(self, address):
            if self.family in (socket.AF_INET, socket.AF_INET6):
                guard(address)
            return super().connect_ex(address)

    with pytest.MonkeyPatch.context() as mp:
        mp.setattr(socket, "socket", GuardedSocket)
        mp.setattr(socket, "create_connection", guard)
        mp.setattr(socket, "getaddrinfo", guard)
        for var in ("AGENT_LLM_BASE_URL", "AGENT_LLM_API_KEY", "AGENT_LLM_MODEL"):
            mp.delenv(var, raising=False)
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_bundle(spec: ModelSpec, seed: int = 0):
    """Untrained bundle with non-trivial weights and a non-identity scaler."""
    from dataclasses import replace

    from metagent.surrogate import ScalerParams

    r = np.random.default_rng(seed)
    b = build_model(replace(spec, init_seed=seed))
    sc = ScalerParams(
        r.normal(size=spec.input_dim), r.uniform(0.5, 2.0, spec.input_dim),
        r.normal(size=spec.output_dim), r.uniform(0.5, 2.0, spec.output_dim),
    )
    return b.with_scaler(sc)


ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
