import numpy as np
import pytest

from ltpretrain.data import Annotation, BoundingBox, DatasetManifest, ImageRecord


def make_manifest(class_lists, num_classes=None, size=32, with_pixels=False, seed=0):
    """Manifest whose image ``i`` holds one box per entry of ``class_lists[i]``."""
    rng = np.random.default_rng(seed)
    images = []
    for i, classes in enumerate(class_lists):
        anns = []
        for j, c in enumerate(classes):
            x0 = float((3 * j) % (size - 8))
            y0 = float((5 * j) % (size - 8))
            anns.append(Annotation(BoundingBox(x0, y0, x0 + 6.0, y0 + 7.0), int(c)))
        pixels = None
        if with_pixels:
            pixels = (rng.integers(0, 256, size=(size, size, 3)) / 255.0).astype(np.float32)
        images.append(ImageRecord(i, size, size, anns, pixels))
    if num_classes is None:
        num_classes = 1 + max((c for cl in class_lists for c in cl), default=0)
    return DatasetManifest(images, num_classes)


@pytest.fixture
def manifest_factory():
    return make_manifest


# ---------------------------------------------------------------------------
# Acceptance summary: one line per criterion at the end of the run
# ---------------------------------------------------------------------------

_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion implemented by a test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    entry = _CRITERIA.setdefault(number, {"title": title, "outcome": "not run", "seconds": 0.0, "detail": ""})
    if report.when == "setup" and report.failed:
        entry["outcome"] = "error"
    if report.when == "call":
        entry["outcome"] = "pass" if report.passed else "FAIL"
        entry["seconds"] = report.duration
        entry["detail"] = "; ".join(str(v) for k, v in item.user_properties if k == "detail")


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        e = _CRITERIA[number]
        line = f"[{e['outcome'].upper():>4}] criterion {number:>2}: {e['title']} ({e['seconds']:.1f} s)"
        if e["detail"]:
            line += f" -- {e['detail']}"
        terminalreporter.write_line(line)
