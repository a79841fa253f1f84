import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from slenet.backbone import BackboneSpec  # noqa: E402
from slenet.model import ModelConfig, SLENet  # noqa: E402


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)


def small_model(width=16, channels=(8, 16, 24, 32), **kw) -> SLENet:
    torch.manual_seed(0)
    spec = BackboneSpec(channels=channels, frozen=kw.pop("frozen", False))
    return SLENet(ModelConfig(backbone=spec, width=width, **kw))


@pytest.fixture
def tiny_model():
    return small_model()


ACCEPTANCE: list[tuple[str, bool, str]] = []


def record(name: str, ok: bool, detail: str) -> None:
    ACCEPTANCE.append((name, bool(ok), detail))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance")
    for name, ok, detail in ACCEPTANCE:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
