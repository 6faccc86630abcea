"""Central finite-difference verification of analytic gradients.

The check perturbs individual coordinates of named parameter tensors and
compares (f(x+h) - f(x-h)) / 2h against the reverse-mode gradient.  Run
it on 64-bit parameters; at h=1e-4 the truncation and round-off error of
the central difference sits well below a 1e-4 relative tolerance for the
smooth losses used here.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class GradCheckResult:
    checked: int
    worst_rel_err: float
    worst_coord: tuple
    passed: bool

    def __str__(self):
        status = "ok" if self.passed else "FAIL"
        return (f"gradcheck {status}: {self.checked} coords, "
                f"worst rel err {self.worst_rel_err:.3e} at {self.worst_coord}")


def relative_error(analytic: float, numeric: float, floor: float = 1e-8) -> float:
    """|a - n| / max(|a|, |n|), with tiny pairs compared absolutely.

    The floor absorbs finite-difference round-off on coordinates whose
    true derivative is zero or near zero.
    """
    diff = abs(analytic - numeric)
    scale = max(abs(analytic), abs(numeric))
    if scale < floor:
        return 0.0 if diff < floor else diff
    return diff / scale


def check_gradients(loss_fn, tensors: dict, n_coords: int = 100, h: float = 1e-4,
                    rtol: float = 1e-4, seed: int = 0) -> GradCheckResult:
    """Compare reverse-mode gradients of loss_fn against central differences.

    loss_fn() -> Tensor scalar; it must read the current .data of the
    given tensors each call.  Coordinates are sampled uniformly across
    all tensors, at least one per tensor when n_coords allows.
    """
    for t in tensors.values():
        t.grad = None
    loss = loss_fn()
    loss.backward()
    analytic = {name: (np.zeros_like(t.data) if t.grad is None else t.grad.copy())
                for name, t in tensors.items()}

    rng = np.random.default_rng(seed)
    names = sorted(tensors)
    coords = []
    for name in names:
        t = tensors[name]
        flat = rng.choice(t.data.size, size=min(t.data.size, max(1, n_coords // len(names))),
                          replace=False)
        coords.extend((name, int(i)) for i in flat)
    while len(coords) < n_coords:
        name = names[rng.integers(len(names))]
        coords.append((name, int(rng.integers(tensors[name].data.size))))

    worst = 0.0
    worst_coord = ("", 0)
    for name, flat_idx in coords:
        t = tensors[name]
        idx = np.unravel_index(flat_idx, t.data.shape)
        orig = t.data[idx]
        t.data[idx] = orig + h
        f_plus = float(loss_fn().data)
        t.data[idx] = orig - h
        f_minus = float(loss_fn().data)
        t.data[idx] = orig
        numeric = (f_plus - f_minus) / (2.0 * h)
        err = relative_error(float(analytic[name][idx]), numeric)
        if err > worst:
            worst = err
            worst_coord = (name, flat_idx)
    return GradCheckResult(checked=len(coords), worst_rel_err=worst,
                           worst_coord=worst_coord, passed=worst <= rtol)
