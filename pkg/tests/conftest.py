import numpy as np
import pytest


def report_line(ok: bool, label: str, detail: str = "") -> None:
    """One-line verdict per acceptance gate, visible with pytest -s."""
    status = "PASS" if ok else "FAIL"
    suffix = f" ({detail})" if detail else ""
    print(f"[{status}] {label}{suffix}")


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(20240817)
