#!/usr/bin/env python3
#
# Analytic-vs-numeric gradient comparison
#
import logging
import numpy as np
from collections.abc import Callable
from pycoalition.autodiff.tensor import Tensor, ComputationRecord, backward


def grad_check(
    build: Callable[[Tensor], Tensor],  # deterministic graph builder: point -> scalar loss
    point: Tensor | np.ndarray,  # where to compare
    eps: float = 1e-5,  # central-difference step
    exclude_kinks: bool = True,  # skip coordinates whose one-sided slopes disagree (L1/hinge/max kinks)
    kink_tolerance: float = 1e-2,  # one-sided slope disagreement that counts as a kink
    tolerance: float | None = None,  # raise if the worst error exceeds this
) -> float:
    """
    Compare reverse-mode gradients of build(point) against central differences.

    Returns max over coordinates of |analytic - numeric| / max(1, |numeric|).
    Runs in 64-bit regardless of the point's storage type.
    """
    assert 1e-6 <= eps <= 1e-2, f"eps {eps} outside [1e-6, 1e-2]"
    logger = logging.getLogger("pycoalition.autodiff.gradcheck")

    values = point.data if isinstance(point, Tensor) else np.asarray(point)
    x = Tensor(np.array(values, dtype=np.float64), requires_grad=True)

    with ComputationRecord() as record:
        loss = build(x)
    backward(loss, record)
    analytic = np.array(x.grad, dtype=np.float64).reshape(-1)

    flat = x.data.reshape(-1)
    f0 = build(x).item()

    worst_error = 0.0
    worst_index = None
    skipped = 0
    for i in range(flat.size):
        original = flat[i]

        flat[i] = original + eps
        f_plus = build(x).item()
        flat[i] = original - eps
        f_minus = build(x).item()
        flat[i] = original

        numeric = (f_plus - f_minus) / (2.0 * eps)

        if exclude_kinks:
            right = (f_plus - f0) / eps
            left = (f0 - f_minus) / eps
            if np.abs(right - left) > kink_tolerance * np.maximum(1.0, np.abs(numeric)):
                skipped += 1
                continue

        error = float(np.abs(analytic[i] - numeric) / np.maximum(1.0, np.abs(numeric)))
        if error > worst_error or worst_index is None:
            worst_error = error
            worst_index = i

    where = None if worst_index is None else np.unravel_index(worst_index, x.shape)
    logger.debug(f"grad check: max relative error {worst_error:.3e} at {where} ({skipped} kink coordinates skipped)")

    if tolerance is not None and worst_error > tolerance:
        raise ValueError(
            f"gradient mismatch: relative error {worst_error:.3e} at coordinate {where} exceeds {tolerance}"
        )

    return worst_error
