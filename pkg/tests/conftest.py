import numpy as np
import pytest

from svglab.datagen import gen_shapes
from svglab.latentspace import SemanticEncoder, SvgCodec


@pytest.fixture(scope="session")
def tiny_shapes():
    return gen_shapes(240, seed=11), gen_shapes(80, seed=12)


@pytest.fixture(scope="session")
def tiny_semantic(tiny_shapes):
    tr, _ = tiny_shapes
    return SemanticEncoder(width=8, hidden=(32,), epochs=25, lr=3e-3, min_accuracy=0.5).fit(tr.images, tr.labels)


@pytest.fixture(scope="session")
def tiny_codec(tiny_shapes, tiny_semantic):
    tr, _ = tiny_shapes
    return SvgCodec(semantic=tiny_semantic, residual_dim=4, residual_hidden=(16,), decoder_hidden=(32,),
                    epochs=3).fit(tr.images)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: dict = {}


@pytest.fixture(scope="session")
def report():
    """Record one pass/fail line per acceptance criterion for the terminal summary."""
    def record(number: int, ok: bool, detail: str) -> bool:
        line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES[number] = line
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
