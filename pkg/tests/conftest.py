"""Shared fixtures and the acceptance-suite summary hook."""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
import pytest

# ---------------------------------------------------------------------------
# Synthetic IDX files (MNIST container format) for data-layer tests
# ---------------------------------------------------------------------------


def write_idx_images(path: Path, images: np.ndarray) -> None:
    """images: (n, 28, 28) uint8."""
    n, rows, cols = images.shape
    path.write_bytes(struct.pack(">IIII", 0x00000803, n, rows, cols) + images.tobytes())


def write_idx_labels(path: Path, labels: np.ndarray) -> None:
    path.write_bytes(struct.pack(">II", 0x00000801, len(labels)) + labels.astype(np.uint8).tobytes())


@pytest.fixture
def idx_dir(tmp_path):
    """A small fake-MNIST directory: 50 random images/labels."""
    rng = np.random.default_rng(0)
    images = rng.integers(0, 256, size=(50, 28, 28), dtype=np.uint8)
    labels = rng.integers(0, 10, size=50, dtype=np.uint8)
    d = tmp_path / "mnist"
    d.mkdir()
    write_idx_images(d / "train-images-idx3-ubyte", images)
    write_idx_labels(d / "train-labels-idx1-ubyte", labels)
    return d


# ---------------------------------------------------------------------------
# Acceptance summary: one line per criterion at the end of the run
# ---------------------------------------------------------------------------

_ACCEPTANCE_PREFIX = "tests/test_acceptance.py"


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = []
    for outcome in ("passed", "failed", "skipped", "error"):
        for report in terminalreporter.stats.get(outcome, []):
            nodeid = getattr(report, "nodeid", "")
            if not nodeid.startswith(_ACCEPTANCE_PREFIX):
                continue
            if getattr(report, "when", "call") != "call" and outcome != "skipped":
                continue
            name = nodeid.split("::", 1)[1]
            status = {"passed": "PASS", "failed": "FAIL", "error": "FAIL", "skipped": "SKIP"}[outcome]
            reason = ""
            if outcome == "skipped" and isinstance(report.longrepr, tuple):
                reason = f"  ({report.longrepr[2]})"
            lines.append(f"{status}  {name}{reason}")
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
