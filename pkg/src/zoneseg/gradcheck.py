"""Central finite-difference validation of analytic gradients.

The harness treats the function under test as a black box mapping named
float64 arrays to a scalar loss plus analytic gradients.  For a handful
of random coordinates per input it perturbs the value by +-h and
compares the central difference against the analytic entry.

Relative error uses a floored denominator,

    rel = |analytic - numeric| / max(|analytic|, |numeric|, floor)

so probes where the true gradient is zero compare absolutely at the
floor scale instead of dividing rounding noise by rounding noise.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

DEFAULT_H = 1e-5
DEFAULT_TOLERANCE = 1e-4
DEFAULT_PROBES = 10
DENOM_FLOOR = 1e-6


@dataclass(frozen=True)
class ProbeRecord:
    """One probed coordinate: analytic vs numeric derivative."""

    input_name: str
    index: tuple[int, ...]
    analytic: float
    numeric: float
    rel_error: float


@dataclass
class GradCheckReport:
    """Outcome of one finite-difference check."""

    tolerance: float
    records: list[ProbeRecord] = field(default_factory=list)

    @property
    def max_rel_error(self) -> float:
        return max((r.rel_error for r in self.records), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance

    def worst(self) -> ProbeRecord | None:
        return max(self.records, key=lambda r: r.rel_error, default=None)

    def summary(self) -> str:
        w = self.worst()
        status = "PASS" if self.passed else "FAIL"
        detail = ""
        if w is not None:
            detail = (
                f" worst {w.input_name}{list(w.index)}: analytic {w.analytic:.6e}, "
                f"numeric {w.numeric:.6e}"
            )
        return (
            f"{status} max_rel_error={self.max_rel_error:.3e} "
            f"tolerance={self.tolerance:.0e}{detail}"
        )


def finite_diff_check(
    func,
    inputs: dict[str, np.ndarray],
    *,
    rng: np.random.Generator,
    tolerance: float = DEFAULT_TOLERANCE,
    h: float = DEFAULT_H,
    probes_per_input: int = DEFAULT_PROBES,
) -> GradCheckReport:
    """Check analytic gradients of ``func`` against central differences.

    ``func`` takes the inputs dict and returns ``(loss, grads)`` where
    ``loss`` is a float and ``grads`` maps each input name to an array
    matching that input's shape.  Inputs must be float64: at h = 1e-5
    single precision has no accurate central difference at all, so other
    dtypes are rejected rather than producing misleading errors.

    Probes ``probes_per_input`` coordinates of every input (all of them
    if the array is smaller), chosen by ``rng``.
    """
    for name, arr in inputs.items():
        if not isinstance(arr, np.ndarray) or arr.dtype != np.float64:
            raise TypeError(
                f"finite_diff_check requires float64 inputs, {name!r} is "
                f"{getattr(arr, 'dtype', type(arr))}"
            )

    _, analytic_grads = func(inputs)
    for name, arr in inputs.items():
        g = analytic_grads[name]
        if g.shape != arr.shape:
            raise ValueError(
                f"analytic gradient for {name!r} has shape {g.shape}, "
                f"expected {arr.shape}"
            )

    report = GradCheckReport(tolerance=tolerance)
    for name in inputs:
        base = inputs[name]
        size = base.size
        n_probes = min(probes_per_input, size)
        flat_choices = rng.choice(size, size=n_probes, replace=False)
        for flat in flat_choices:
            index = np.unravel_index(int(flat), base.shape)
            perturbed = {k: (v.copy() if k == name else v) for k, v in inputs.items()}
            perturbed[name][index] = base[index] + h
            loss_plus, _ = func(perturbed)
            perturbed[name][index] = base[index] - h
            loss_minus, _ = func(perturbed)
            numeric = (loss_plus - loss_minus) / (2.0 * h)
            analytic = float(analytic_grads[name][index])
            denom = max(abs(analytic), abs(numeric), DENOM_FLOOR)
            rel = abs(analytic - numeric) / denom
            report.records.append(
                ProbeRecord(
                    input_name=name,
                    index=tuple(int(i) for i in index),
                    analytic=analytic,
                    numeric=float(numeric),
                    rel_error=float(rel),
                )
            )
    return report


def projection_array(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    """Fixed random projection used to scalarise an array-valued op.

    ``loss = sum(output * R)`` turns any op into a scalar function whose
    input gradient is the op's backward applied to R.
    """
    return rng.standard_normal(shape)
