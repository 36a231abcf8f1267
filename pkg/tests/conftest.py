import math

import numpy as np
import pytest

from codap.nn import MlpModel

_ACCEPTANCE = []


@pytest.fixture
def record_criterion():
    """Collect one PASS/FAIL line per acceptance criterion for the summary."""

    def record(number, title, passed, detail=""):
        _ACCEPTANCE.append((number, title, passed, detail))

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, passed, detail in sorted(_ACCEPTANCE):
        status = "PASS" if passed else "FAIL"
        line = f"[{status}] criterion {number}: {title}"
        if detail:
            line += f" ({detail})"
        terminalreporter.write_line(line)


def affine_model(W, b):
    """MLP whose output is exactly ``x @ W + b`` (``W`` is ``d x m``).

    Hidden layers carry ``(relu(x), relu(-x))`` so the ReLUs cancel out.
    """
    W = np.asarray(W, dtype=float)
    d, m = W.shape
    eye = np.eye(d)
    W1 = np.vstack([eye, -eye])
    W2 = np.eye(2 * d)
    W3 = np.hstack([W.T, -W.T])
    return MlpModel([W1, W2, W3], [np.zeros(2 * d), np.zeros(2 * d), np.asarray(b, float)])


def loop_forward(model, X):
    """Scalar-loop forward pass used as an oracle for the vectorised one."""
    out = []
    last = len(model.weights) - 1
    for x in np.asarray(X, dtype=float):
        a = [float(v) for v in x]
        for k, (W, b) in enumerate(zip(model.weights, model.biases)):
            z = []
            for r in range(W.shape[0]):
                s = float(b[r])
                for c in range(W.shape[1]):
                    s += float(W[r, c]) * a[c]
                z.append(s if k == last else max(0.0, s))
            a = z
        out.append(a)
    return np.array(out)


def hand_pearson(x, y):
    n = len(x)
    mx = math.fsum(x) / n
    my = math.fsum(y) / n
    sxy = math.fsum((a - mx) * (b - my) for a, b in zip(x, y))
    sxx = math.fsum((a - mx) ** 2 for a in x)
    syy = math.fsum((b - my) ** 2 for b in y)
    return sxy / math.sqrt(sxx * syy)
