import pytest

from addlab.dataset import build_image_set
from addlab.glyphs import RenderConfig

_ACCEPTANCE = {}


def acceptance_line(number: int, passed: bool, detail: str) -> None:
    line = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"
    _ACCEPTANCE[number] = line
    print(line)


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance: end-to-end acceptance criteria (slow)")


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for number in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[number])


@pytest.fixture(scope="session")
def omega9():
    return build_image_set(9, RenderConfig.square(64))


@pytest.fixture(scope="session")
def omega29():
    return build_image_set(29, RenderConfig.square(64))


@pytest.fixture(scope="session")
def omega99_small():
    # 32x32 keeps the N=99 fixture cheap; splits only look at keys
    return build_image_set(99, RenderConfig(width=32, height=32, margin=1))
