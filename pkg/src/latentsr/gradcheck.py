"""Central finite-difference verification of tape gradients.

The probe trick: instead of differencing every output element, project the
output onto a fixed random probe vector and difference the resulting scalar.
One probe checks the full Jacobian-transpose action, which is exactly what
``backward`` computes.

Float32 forwards limit attainable accuracy, so two standard precautions are
taken: the probe dot product is accumulated in float64, and the divisor is
the *realized* perturbation (the float32 rounding of x+h changes the step
size by up to ~6e-8 of |x|, which at h=1e-3 would alone cost ~6e-5 relative
error if ignored).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, mul, sum_

__all__ = ["GradReport", "check_gradients"]


@dataclass
class GradReport:
    """Per-entry relative errors between tape and finite-difference grads."""

    op: str
    errors: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def max_error(self) -> float:
        return float(self.errors.max()) if self.errors.size else 0.0

    @property
    def median_error(self) -> float:
        return float(np.median(self.errors)) if self.errors.size else 0.0


def check_gradients(
    f: Callable[..., Tensor],
    tensors: Sequence[Tensor],
    rng: np.random.Generator,
    h: float = 1e-3,
    op: str = "",
) -> GradReport:
    """Compare tape gradients of probe·f(tensors) against central differences.

    Every element of every input tensor is perturbed individually. Relative
    error for one element is |analytic − numeric| / max(scale, |numeric|)
    where scale is the RMS of that tensor's numeric gradient; the floor stops
    near-zero entries from reporting meaningless 100% errors while leaving
    genuinely wrong gradients visible.
    """
    out = f(*tensors)
    probe = rng.standard_normal(out.data.size).astype(np.float32)
    probe64 = probe.astype(np.float64)

    def probe_loss() -> float:
        cur = f(*tensors)
        return float(np.dot(cur.data.reshape(-1).astype(np.float64), probe64))

    for t in tensors:
        t.zero_grad()
    tape_loss = sum_(mul(out, Tensor(probe.reshape(out.shape))))
    tape_loss.backward()

    all_errors: list[np.ndarray] = []
    for t in tensors:
        if not t.requires_grad:
            continue
        analytic = t.grad.astype(np.float64).reshape(-1)
        numeric = np.zeros_like(analytic)
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            up = np.float32(orig + h)
            dn = np.float32(orig - h)
            flat[i] = up
            lp = probe_loss()
            flat[i] = dn
            lm = probe_loss()
            flat[i] = orig
            numeric[i] = (lp - lm) / (float(up) - float(dn))
        scale = max(np.sqrt(np.mean(numeric**2)), 1e-8)
        denom = np.maximum(np.abs(numeric), scale)
        all_errors.append(np.abs(analytic - numeric) / denom)

    errors = np.concatenate(all_errors) if all_errors else np.zeros(0)
    return GradReport(op=op, errors=errors)
