"""Central finite differences, used as the independent oracle for backward()."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from pvectors.tensor.tensor import Tape, Tensor, backward

REL_FLOOR = 1e-8


def _scalar(value) -> float:
    if isinstance(value, Tensor):
        return float(value.data)
    return float(value)


def finite_diff_grad(
    f: Callable[[Tensor], object],
    x: Tensor,
    h: float = 1e-5,
    indices: Optional[Iterable[tuple]] = None,
) -> np.ndarray:
    """Estimate df/dx elementwise as (f(x + h e_i) - f(x - h e_i)) / 2h.

    ``x.data`` is perturbed in place and restored, so ``f`` may close over
    ``x`` (e.g. a model parameter) and ignore its argument. When ``indices``
    is given only those elements are estimated; the rest stay zero.
    """
    grad = np.zeros(x.shape)
    flat_iter = np.ndindex(x.shape) if indices is None else indices
    for idx in flat_iter:
        orig = x.data[idx]
        x.data[idx] = orig + h
        up = _scalar(f(x))
        x.data[idx] = orig - h
        down = _scalar(f(x))
        x.data[idx] = orig
        grad[idx] = (up - down) / (2.0 * h)
    return grad


def branch_pattern(f: Callable[[], object]) -> tuple:
    """Evaluate ``f`` and return the relu/max branch choices it made."""
    from pvectors.tensor import ops

    with ops.branch_log() as log:
        f()
    return tuple(log)


def crosses_kink(f: Callable[[], object], x: Tensor, idx: tuple, h: float) -> bool:
    """True when moving x[idx] by +-h changes a relu sign or a max argmax."""
    orig = x.data[idx]
    base = branch_pattern(f)
    try:
        for delta in (h, -h):
            x.data[idx] = orig + delta
            if branch_pattern(f) != base:
                return True
    finally:
        x.data[idx] = orig
    return False


def relative_error(analytic, numeric, floor: float = REL_FLOOR) -> np.ndarray:
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def analytic_grads(f: Callable[[], Tensor], tensors: Sequence[Tensor]) -> list[np.ndarray]:
    for t in tensors:
        t.grad = None
    with Tape():
        loss = f()
    backward(loss)
    return [np.zeros(t.shape) if t.grad is None else t.grad.copy() for t in tensors]


@dataclass
class GradCheckResult:
    name: str
    max_rel_error: float
    checked: int
    skipped: int = 0

    def passed(self, tol: float) -> bool:
        return self.max_rel_error <= tol


def check_gradients(
    f: Callable[[], Tensor],
    named: Sequence[tuple[str, Tensor]],
    h: float = 1e-5,
    samples: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
    floor: float = REL_FLOOR,
    skip_kinks: bool = False,
) -> list[GradCheckResult]:
    """Compare backward() against central differences for each named tensor.

    With ``samples`` set, that many (tensor, element) pairs are drawn uniformly
    over all elements of all tensors instead of checking every element.

    With ``skip_kinks`` an element whose +-h probe flips a relu sign or a max
    argmax is not compared (the difference quotient straddles a kink there);
    in sampling mode another element is drawn in its place. Skips are counted
    in the results.
    """
    tensors = [t for _, t in named]
    grads = analytic_grads(f, tensors)
    sizes = np.array([t.size for t in tensors])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    if samples is None:
        candidates = np.arange(sizes.sum())
        wanted = int(sizes.sum())
    else:
        rng = rng if rng is not None else np.random.default_rng(0)
        candidates = rng.permutation(int(sizes.sum()))
        wanted = min(samples, int(sizes.sum()))

    picks: dict[int, list[tuple]] = {i: [] for i in range(len(tensors))}
    skipped = dict.fromkeys(range(len(tensors)), 0)
    taken = 0
    for k in candidates:
        if taken == wanted:
            break
        i = int(np.searchsorted(offsets, k, side="right") - 1)
        idx = np.unravel_index(int(k - offsets[i]), tensors[i].shape)
        if skip_kinks and crosses_kink(f, tensors[i], idx, h):
            skipped[i] += 1
            continue
        picks[i].append(idx)
        taken += 1

    results = []
    for i, (name, t) in enumerate(named):
        if not picks[i] and not skipped[i]:
            continue
        if not picks[i]:
            results.append(GradCheckResult(name, 0.0, 0, skipped[i]))
            continue
        numeric = finite_diff_grad(lambda _: f(), t, h=h, indices=picks[i])
        errs = [relative_error(grads[i][idx], numeric[idx], floor) for idx in picks[i]]
        results.append(GradCheckResult(name, float(np.max(errs)), len(picks[i]), skipped[i]))
    return results
