import pytest

from nmsforge.boxcore import BoundingBox, Detection, SourceAnchor

ACCEPTANCE_LINES = []


@pytest.fixture
def criterion_report():
    """Record a one-line acceptance verdict, printed in the terminal summary."""

    def report(number, name, passed, detail=""):
        ACCEPTANCE_LINES.append(f"[{'PASS' if passed else 'FAIL'}] criterion {number}: {name} {detail}".rstrip())

    return report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def make_det(x1, y1, x2, y2, score, det_id, class_id=0, source=None):
    src = None
    if source is not None:
        *box, channel = source
        src = SourceAnchor(BoundingBox(*box), channel)
    return Detection(BoundingBox(x1, y1, x2, y2), score, class_id, det_id, src)
