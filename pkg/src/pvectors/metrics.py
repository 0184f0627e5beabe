"""Verification scoring: cosine scores, adaptive s-norm, EER, minDCF and the text file formats."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from pvectors.errors import DimensionError, FormatError

SIGMA_FLOOR = 1e-12


def cosine_score(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64).reshape(-1), np.asarray(b, dtype=np.float64).reshape(-1)
    if a.shape != b.shape:
        raise DimensionError(f"embedding sizes differ: {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ValueError("cannot score a zero-norm embedding")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def cosine_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """All-pairs cosine scores between the rows of ``a`` and ``b``."""
    na, nb = np.linalg.norm(a, axis=1), np.linalg.norm(b, axis=1)
    if (na == 0).any() or (nb == 0).any():
        raise ValueError("cannot score a zero-norm embedding")
    return np.clip((a / na[:, None]) @ (b / nb[:, None]).T, -1.0, 1.0)


# ---------------------------------------------------------------------------
# trials and scores
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Trial:
    target: bool
    enroll: str
    test: str


@dataclass
class ScoreSet:
    """Raw scores aligned with trial labels; ``normalized`` is filled in by s-norm."""

    scores: np.ndarray
    labels: np.ndarray
    trials: list[Trial] = field(default_factory=list)
    normalized: Optional[np.ndarray] = None

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        self.labels = np.asarray(self.labels, dtype=bool).reshape(-1)
        if self.scores.shape != self.labels.shape:
            raise DimensionError(f"{self.scores.size} scores for {self.labels.size} labels")
        if not np.isfinite(self.scores).all():
            raise ValueError("scores must be finite")

    def __len__(self) -> int:
        return self.scores.size

    @property
    def final(self) -> np.ndarray:
        return self.normalized if self.normalized is not None else self.scores


def read_trials(path) -> list[Trial]:
    """Parse "label enroll test" lines, label 1 for target and 0 for nontarget."""
    trials = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 3 or parts[0] not in ("0", "1"):
            raise FormatError(f"{path}:{lineno}: expected 'label enroll test', got {line!r}")
        trials.append(Trial(parts[0] == "1", parts[1], parts[2]))
    return trials


def write_trials(path, trials: Sequence[Trial]) -> None:
    Path(path).write_text("".join(f"{int(t.target)} {t.enroll} {t.test}\n" for t in trials))


def score_trials(trials: Sequence[Trial], embeddings: dict[str, np.ndarray]) -> ScoreSet:
    missing = sorted({i for t in trials for i in (t.enroll, t.test)} - set(embeddings))
    if missing:
        raise KeyError(f"trials reference unknown ids: {missing[:5]}{' ...' if len(missing) > 5 else ''}")
    scores = [cosine_score(embeddings[t.enroll], embeddings[t.test]) for t in trials]
    return ScoreSet(np.array(scores), np.array([t.target for t in trials]), list(trials))


def write_scores(path, scores: ScoreSet) -> None:
    """One "enroll test score" line per trial, 6 decimals; the label column is appended."""
    lines = [
        f"{t.enroll} {t.test} {s:.6f} {int(t.target)}\n" for t, s in zip(scores.trials, scores.final)
    ]
    Path(path).write_text("".join(lines))


def read_scores(path) -> ScoreSet:
    trials, values = [], []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split()
        try:
            if len(parts) != 4 or parts[3] not in ("0", "1"):
                raise ValueError
            value = float(parts[2])
        except ValueError:
            raise FormatError(f"{path}:{lineno}: expected 'enroll test score label', got {line!r}") from None
        trials.append(Trial(parts[3] == "1", parts[0], parts[1]))
        values.append(value)
    return ScoreSet(np.array(values), np.array([t.target for t in trials], dtype=bool), trials)


def write_embeddings(path, ids: Sequence[str], emb: np.ndarray) -> None:
    """Text lines "id dim v1 ... vD" with round-trippable floats."""
    lines = [f"{i} {len(e)} " + " ".join(repr(float(v)) for v in e) + "\n" for i, e in zip(ids, emb)]
    Path(path).write_text("".join(lines))


def read_embeddings(path) -> dict[str, np.ndarray]:
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split()
        try:
            dim = int(parts[1])
            values = np.array([float(v) for v in parts[2:]])
        except (IndexError, ValueError):
            raise FormatError(f"{path}:{lineno}: malformed embedding line") from None
        if values.size != dim:
            raise FormatError(f"{path}:{lineno}: declared {dim} values, found {values.size}")
        out[parts[0]] = values
    return out


# ---------------------------------------------------------------------------
# score normalization
# ---------------------------------------------------------------------------


def _top_stats(cohort_scores: np.ndarray, top_k: int) -> tuple[np.ndarray, np.ndarray]:
    top = -np.sort(-cohort_scores, axis=1)[:, :top_k]
    return top.mean(axis=1), np.maximum(top.std(axis=1), SIGMA_FLOOR)


def snorm_from_cohort(raw: np.ndarray, enroll_cohort: np.ndarray, test_cohort: np.ndarray, top_k: int) -> np.ndarray:
    """Adaptive s-norm given each trial's scores against the cohort, (n_trials, n_cohort) per side."""
    raw = np.asarray(raw, dtype=np.float64)
    if enroll_cohort.shape[1] == 0:
        raise ValueError("cohort is empty")
    if not 1 <= top_k <= enroll_cohort.shape[1]:
        raise ValueError(f"top_k must be in [1, {enroll_cohort.shape[1]}], got {top_k}")
    mu_e, sd_e = _top_stats(enroll_cohort, top_k)
    mu_t, sd_t = _top_stats(test_cohort, top_k)
    return 0.5 * ((raw - mu_e) / sd_e + (raw - mu_t) / sd_t)


def adaptive_snorm(scores: ScoreSet, embeddings: dict[str, np.ndarray], cohort: np.ndarray, top_k: int = 10) -> ScoreSet:
    """Normalize every trial with the top-k cohort statistics of its enrollment and test sides."""
    cohort = np.asarray(cohort, dtype=np.float64)
    if cohort.ndim != 2 or cohort.shape[0] == 0:
        raise ValueError("cohort is empty")
    ids = sorted({i for t in scores.trials for i in (t.enroll, t.test)})
    index = {i: n for n, i in enumerate(ids)}
    vs_cohort = cosine_matrix(np.stack([embeddings[i] for i in ids]), cohort)
    e_rows = vs_cohort[[index[t.enroll] for t in scores.trials]]
    t_rows = vs_cohort[[index[t.test] for t in scores.trials]]
    norm = snorm_from_cohort(scores.scores, e_rows, t_rows, top_k)
    return ScoreSet(scores.scores, scores.labels, list(scores.trials), norm)


# ---------------------------------------------------------------------------
# detection metrics
# ---------------------------------------------------------------------------


def _split(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels, dtype=bool).reshape(-1)
    if scores.shape != labels.shape:
        raise DimensionError(f"{scores.size} scores for {labels.size} labels")
    tar, non = scores[labels], scores[~labels]
    if tar.size == 0 or non.size == 0:
        raise ValueError("need at least one target and one nontarget trial")
    return tar, non


def roc_points(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    """(P_fa, P_miss) at every distinct threshold plus both infinities.

    A trial is accepted when its score is >= the threshold.
    """
    tar, non = _split(scores, labels)
    thresholds = np.unique(np.concatenate([tar, non]))
    tar_s, non_s = np.sort(tar), np.sort(non)
    miss = np.searchsorted(tar_s, thresholds, side="left") / tar.size
    fa = 1.0 - np.searchsorted(non_s, thresholds, side="left") / non.size
    p_fa = np.concatenate([[1.0], fa, [0.0]])
    p_miss = np.concatenate([[0.0], miss, [1.0]])
    return p_fa, p_miss


def _lower_hull(x: np.ndarray, y: np.ndarray) -> list[tuple[float, float]]:
    """Lower convex hull of points sorted by increasing x (monotone chain)."""
    hull: list[tuple[float, float]] = []
    for p in zip(x.tolist(), y.tolist()):
        while len(hull) >= 2:
            (x1, y1), (x2, y2) = hull[-2], hull[-1]
            if (x2 - x1) * (p[1] - y1) - (y2 - y1) * (p[0] - x1) <= 0:
                hull.pop()
            else:
                break
        hull.append(p)
    return hull


def eer(scores, labels) -> float:
    """Equal error rate on the convex hull of the ROC, interpolating linearly between hull vertices."""
    p_fa, p_miss = roc_points(scores, labels)
    # Points run from (1, 0) to (0, 1); reverse so P_fa increases.
    hull = _lower_hull(p_fa[::-1], p_miss[::-1])
    for (x1, y1), (x2, y2) in zip(hull, hull[1:]):
        d1, d2 = y1 - x1, y2 - x2
        if d1 >= 0 >= d2:
            if d1 == d2:
                return float(x1)
            w = d1 / (d1 - d2)
            return float(x1 + w * (x2 - x1))
    raise AssertionError("ROC hull never crosses the diagonal")


def min_dcf(scores, labels, p_target: float = 0.01, c_fa: float = 1.0, c_miss: float = 1.0) -> float:
    """Minimum normalized detection cost over all thresholds, both trivial ones included."""
    p_fa, p_miss = roc_points(scores, labels)
    cost = c_miss * p_target * p_miss + c_fa * (1.0 - p_target) * p_fa
    return float(cost.min() / min(c_miss * p_target, c_fa * (1.0 - p_target)))


# Brute-force twins: no sorting tricks, no hull construction.


def eer_bruteforce(scores, labels) -> float:
    """Smallest diagonal crossing over every segment joining two operating points."""
    tar, non = _split(scores, labels)
    pts = [(1.0, 0.0), (0.0, 1.0)]
    for thr in sorted(set(tar.tolist()) | set(non.tolist())):
        pts.append((float(np.mean(non >= thr)), float(np.mean(tar < thr))))
    best = math.inf
    for x1, y1 in pts:
        for x2, y2 in pts:
            d1, d2 = y1 - x1, y2 - x2
            if d1 == 0:
                best = min(best, x1)
            elif d1 > 0 > d2:
                w = d1 / (d1 - d2)
                best = min(best, x1 + w * (x2 - x1))
    return best


def min_dcf_bruteforce(scores, labels, p_target=0.01, c_fa=1.0, c_miss=1.0) -> float:
    tar, non = _split(scores, labels)
    norm = min(c_miss * p_target, c_fa * (1.0 - p_target))
    best = math.inf
    for thr in list(tar) + list(non) + [math.inf, -math.inf]:
        cost = c_miss * p_target * np.mean(tar < thr) + c_fa * (1 - p_target) * np.mean(non >= thr)
        best = min(best, cost / norm)
    return float(best)
