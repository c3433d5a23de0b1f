"""Shared test helpers plus the acceptance-criterion summary.

The gradient checkers compare reverse-mode gradients against central
finite differences (step 1e-4) with a floored relative error, the same
discipline every module test and the acceptance sweep use. The terminal
summary hook maps each acceptance test class to its criterion number and
prints one PASS/FAIL line per criterion at the end of a run.
"""

from __future__ import annotations

import numpy as np

from protoseg import numerics as nx

FD_STEP = 1e-4
FD_TOL = 1e-3
FD_FLOOR = 1e-4


def relative_error(analytic: float, numeric: float) -> float:
    """Gap over the larger magnitude, floored so near-zero pairs compare
    absolutely instead of blowing up."""
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), FD_FLOOR)


def central_difference(build_loss, array: np.ndarray, flat_index: int,
                       step: float = FD_STEP) -> float:
    """Numeric d(loss)/d(array[flat_index]) with the tape switched off."""
    flat = array.reshape(-1)
    keep = flat[flat_index]
    with nx.no_grad():
        flat[flat_index] = keep + step
        hi = float(build_loss().data)
        flat[flat_index] = keep - step
        lo = float(build_loss().data)
    flat[flat_index] = keep
    return (hi - lo) / (2.0 * step)


def assert_gradients_match(build_loss, params, coords=None,
                           step: float = FD_STEP, tol: float = FD_TOL) -> int:
    """Check reverse-mode gradients of a scalar loss coordinate by coordinate.

    ``build_loss`` must rebuild the graph from the tensors' current data on
    every call; ``params`` maps name -> Tensor (a ParamStore works as is).
    ``coords`` optionally restricts the probed flat coordinates per name.
    Returns how many coordinates were checked.
    """
    grads = nx.backward(build_loss(), params)
    named = params.items() if hasattr(params, "items") else list(params)
    checked = 0
    for name, tensor in named:
        analytic = grads[name].reshape(-1)
        indices = range(tensor.data.size) if coords is None else coords[name]
        for i in indices:
            numeric = central_difference(build_loss, tensor.data, i, step)
            rel = relative_error(float(analytic[i]), numeric)
            assert rel <= tol, (
                f"{name}[{i}]: analytic {analytic[i]:.8g}, numeric "
                f"{numeric:.8g}, relative error {rel:.3g}"
            )
            checked += 1
    return checked


_CRITERIA = (
    (1, "TestGradientFidelity",
     "episode loss gradients match central differences on every coordinate"),
    (2, "TestIdentityReductions",
     "identity-configuration reductions are exact"),
    (3, "TestOracleEquivalence",
     "fusion, refinement and loss match independent oracles"),
    (4, "TestProbabilityContracts",
     "softmax, pixel probabilities, adjustment and convex hull contracts"),
    (5, "TestDiceContract", "dice edge cases are exact"),
    (6, "TestHeldOutExclusion",
     "no sampled training episode touches a held-out class"),
    (7, "TestTrainingSmoke",
     "training beats the untrained baseline; random bank ends worse"),
    (8, "TestDeterminism",
     "repeated runs produce byte-identical traces, checkpoints and reports"),
)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    stats = terminalreporter.stats
    outcomes = {}
    for key in ("passed", "failed", "error", "skipped"):
        for report in stats.get(key, []):
            nodeid = getattr(report, "nodeid", "")
            if "test_acceptance.py::" not in nodeid:
                continue
            parts = nodeid.split("::")
            if len(parts) < 2:
                continue
            outcomes.setdefault(parts[1], []).append(key)
    if not outcomes:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for number, cls, text in _CRITERIA:
        seen = outcomes.get(cls)
        if not seen:
            verdict = "NOT RUN"
        elif any(k in ("failed", "error") for k in seen):
            verdict = "FAIL"
        elif all(k == "skipped" for k in seen):
            verdict = "SKIPPED"
        else:
            verdict = "PASS"
        terminalreporter.write_line(f"CRITERION {number}: {verdict} ({text})")
