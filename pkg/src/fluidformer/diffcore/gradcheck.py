"""Central finite-difference check of tape gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import Tape, Tensor


@dataclass
class GradCheckReport:
    max_rel_err: float
    tol: float
    per_input: dict[str, float] = field(default_factory=dict)
    checked_entries: int = 0
    skipped_kinks: int = 0

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_err < self.tol)

    def __str__(self):
        status = "PASS" if self.passed else "FAIL"
        skipped = f", {self.skipped_kinks} skipped at kinks" if self.skipped_kinks else ""
        return (f"{status} max_rel_err={self.max_rel_err:.3e} "
                f"(tol {self.tol:g}, {self.checked_entries} entries{skipped})")


def grad_check(f: Callable[[], Tensor], inputs: Sequence[Tensor] | dict, tol: float = 1e-4,
               h: float = 1e-5, max_entries: int | None = None, seed: int = 0,
               floor: float = 1e-10, kink_tol: float | None = None) -> GradCheckReport:
    """Compare tape gradients of the scalar ``f()`` with central differences.

    ``f`` must rebuild its graph from the current values of ``inputs`` on every
    call.  For each input the error is ``max |g_tape - g_fd| / max(max |g_fd|, floor)``
    over the checked entries, relative to the input's whole gradient scale.  With
    ``max_entries`` only a seeded random subset of entries is perturbed per input.

    With ``kink_tol`` set, entries whose one-sided slopes differ by more than
    ``kink_tol`` times the gradient scale are retried with steps of ``h/10`` and
    ``h/100``.  Entries that still straddle a kink (e.g. a ReLU input within the
    step of zero) are left out and counted in the report.
    """
    if isinstance(inputs, dict):
        named = list(inputs.items())
    else:
        named = [(t.name or f"input{i}", t) for i, t in enumerate(inputs)]
    saved = [t.requires_grad for _, t in named]
    for _, t in named:
        t.requires_grad = True
        t.grad = None
    with Tape():
        out = f()
    if out.size != 1:
        raise ValueError(f"grad_check needs a scalar function, got shape {out.shape}")
    from .tensor import backward

    backward(out)
    f0 = out.item()
    rng = np.random.default_rng(seed)
    report = GradCheckReport(0.0, tol)
    for (name, t), req in zip(named, saved):
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad.copy()
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, max_entries, replace=False))
        numeric = np.empty(len(idx))
        bend = np.empty(len(idx))
        for k, i in enumerate(idx):
            numeric[k], bend[k] = _central(f, flat, i, h, f0)
        a = analytic.reshape(-1)[idx]
        scale = max(np.abs(numeric).max(initial=0.0), np.abs(analytic).max(initial=0.0), floor)
        keep = np.ones(len(idx), dtype=bool)
        if kink_tol is not None:
            for k in np.flatnonzero(bend > kink_tol * scale):
                for hk in (h * 1e-1, h * 1e-2):
                    numeric[k], bend[k] = _central(f, flat, idx[k], hk, f0)
                    if bend[k] <= kink_tol * scale:
                        break
            keep = bend <= kink_tol * scale
            report.skipped_kinks += int((~keep).sum())
        err = float(np.abs(a - numeric)[keep].max(initial=0.0) / scale)
        report.per_input[name] = err
        report.max_rel_err = max(report.max_rel_err, err)
        report.checked_entries += int(keep.sum())
        t.requires_grad = req
        t.grad = None
    return report


def _central(f, flat: np.ndarray, i: int, h: float, f0: float) -> tuple[float, float]:
    """Central difference at entry ``i`` and the slope jump ``|f(+h) - 2 f0 + f(-h)| / h``."""
    orig = flat[i]
    flat[i] = orig + h
    fp = f().item()
    flat[i] = orig - h
    fm = f().item()
    flat[i] = orig
    return (fp - fm) / (2.0 * h), abs(fp - 2.0 * f0 + fm) / h
