"""Extending a network element's prediction window by chaining it in time.

Each segment predicts ``n_t`` steps from the current state, keeps the first
``t_c`` of them and hands the state at step ``t_c`` to the next segment through
the last two static rows (displacement, velocity).  The dynamic input of every
segment is the load evaluated at absolute times, so harmonic phase carries over.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .sfne import Ensemble, sample_errors

IMPROVEMENT_THRESHOLD = 0.05
CUTOFF_FACTOR = 1.5


def ensemble_curve(predictions, truth, channels: int = 2) -> np.ndarray:
    """Mean test e_r of the running mean of the first k member predictions, k = 1..n."""
    preds = list(predictions)
    acc = np.zeros_like(np.asarray(preds[0], dtype=float))
    curve = []
    for k, p in enumerate(preds, start=1):
        acc += p
        curve.append(float(np.mean(sample_errors(acc / k, truth, channels))))
    return np.array(curve)


def select_ensemble_size(models, test_set, improvement_threshold: float = IMPROVEMENT_THRESHOLD,
                         channels: int = 2) -> tuple[int, np.ndarray]:
    """Smallest k whose successor improves mean test e_r by less than the relative threshold.

    ``models`` are network elements (or precomputed prediction arrays).
    Returns ``(k, curve)`` where ``curve[k-1]`` is the e_r of the k-member mean.
    """
    from .sfne import predict

    models = list(models)
    if not models:
        raise ConfigError("need at least one candidate model")
    preds = [m if isinstance(m, np.ndarray) else predict(m, test_set.in_static, test_set.in_dyn) for m in models]
    curve = ensemble_curve(preds, test_set.out, channels)
    return size_from_curve(curve, improvement_threshold), curve


def size_from_curve(curve, improvement_threshold: float = IMPROVEMENT_THRESHOLD) -> int:
    """Grow k while the next member cuts the error by at least the relative threshold."""
    curve = np.asarray(curve, dtype=float)
    k = 1
    while k < len(curve) and curve[k] < curve[k - 1] * (1.0 - improvement_threshold):
        k += 1
    return k


@dataclass
class Cutoff:
    t_c: int               # number of steps kept per segment (1-based step index)
    threshold: float
    flat: bool             # no step exceeded the threshold


def find_cutoff(profile, factor: float = CUTOFF_FACTOR) -> Cutoff:
    """Last step whose error stays within ``factor`` x the median of the middle half.

    ``profile[j]`` is e_r at step j + 1.  The result is capped at n_t - 1 so a
    segment always hands over before the end of its window; ``flat`` flags a
    profile that never rises above the threshold.
    """
    e = np.asarray(profile, dtype=float)
    n = e.size
    if n < 4:
        raise ConfigError(f"cut-off needs a profile of at least 4 steps, got {n}")
    mid = e[n // 4: n - n // 4]
    thr = factor * float(np.median(mid))
    ok = np.nonzero(e <= thr)[0]
    flat = bool(ok.size == n)
    t_c = int(ok[-1]) + 1 if ok.size else 1
    return Cutoff(min(t_c, n - 1), thr, flat)


def segment_plan(horizon: int, t_c: int) -> list[tuple[int, int]]:
    """(start_step, kept_steps) per segment: full segments of ``t_c`` then a remainder <= t_c."""
    if horizon < 1 or t_c < 1:
        raise ConfigError("horizon and t_c must be positive")
    plan, start = [], 0
    while horizon - start > t_c:
        plan.append((start, t_c))
        start += t_c
    plan.append((start, horizon - start))
    return plan


@dataclass
class LongRunResult:
    out: np.ndarray                 # (horizon, 2 n_x): rows are steps 1..horizon
    t_c: int
    k: int
    segments: list                  # (start_step, kept_steps)
    dt: float
    segment_errors: list = field(default_factory=list)
    error: float | None = None

    @property
    def n_x(self) -> int:
        return self.out.shape[1] // 2

    def manifest(self) -> dict:
        return {"t_c": self.t_c, "k": self.k, "segment_count": len(self.segments),
                "segments": [list(s) for s in self.segments], "horizon": int(self.out.shape[0]),
                "dt": self.dt, "segment_errors": self.segment_errors, "error": self.error}

    def to_csv(self, path, x=None) -> None:
        """Long format ``step,time,x,u,u_dot``; a JSON sidecar ``<path>.json`` holds the segment plan."""
        n = self.n_x
        x = np.linspace(0.0, 1.0, n) if x is None else np.asarray(x, dtype=float)
        with open(path, "w") as fh:
            fh.write("step,time,x,u,u_dot\n")
            for i, row in enumerate(self.out, start=1):
                t = i * self.dt
                for j in range(n):
                    fh.write(f"{i},{t!r},{float(x[j])!r},{float(row[j])!r},{float(row[n + j])!r}\n")
        with open(f"{path}.json", "w") as fh:
            json.dump(self.manifest(), fh, indent=1)


def _as_predictor(model):
    if isinstance(model, Ensemble):
        return (lambda s, d, start: model.predict(s, d)), len(model)
    if hasattr(model, "arch"):
        from .sfne import predict
        return (lambda s, d, start: predict(model, s, d)), 1
    return model, 1


def concatenate(model, load, in_static0, horizon: int, t_c: int, n_t: int, dt: float,
                truth=None) -> LongRunResult:
    """Chain predictions over ``horizon`` steps.

    ``model`` is an :class:`~fena.sfne.Ensemble`, a single network element, or
    a callable ``(static, in_dyn, start_step) -> (n_t, 2 n_x)``.  ``load(t)``
    gives the dynamic input at absolute times (scalar per step).  When
    ``truth`` (horizon, 2 n_x) is given, per-segment and overall e_r are
    recorded.
    """
    predictor, k = _as_predictor(model)
    static = np.array(in_static0, dtype=float, copy=True)
    if static.ndim != 2 or static.shape[0] < 2:
        raise ConfigError(f"static input must be (channels >= 2, n_x), got {static.shape}")
    n_x = static.shape[1]
    if not 1 <= t_c <= n_t:
        raise ConfigError(f"t_c must lie in [1, {n_t}], got {t_c}")
    plan = segment_plan(horizon, t_c)
    out = np.empty((horizon, 2 * n_x))
    for start, keep in plan:
        steps = np.arange(start + 1, start + n_t + 1)
        d = np.asarray(load(steps * dt), dtype=float).reshape(n_t, -1)
        pred = np.asarray(predictor(static.copy(), d, start), dtype=float)
        if pred.ndim != 2 or pred.shape[1] != 2 * n_x:
            raise ConfigError(f"model output width {pred.shape[-1]} lacks the velocity channel "
                              f"(need {2 * n_x}); state handoff impossible")
        out[start:start + keep] = pred[:keep]
        static[-2] = pred[keep - 1, :n_x]
        static[-1] = pred[keep - 1, n_x:]
    res = LongRunResult(out, t_c, k, plan, dt)
    if truth is not None:
        truth = np.asarray(truth, dtype=float)
        for start, keep in plan:
            seg = slice(start, start + keep)
            res.segment_errors.append(float(sample_errors(out[None, seg], truth[None, seg], 2)[0]))
        res.error = float(sample_errors(out[None], truth[None], 2)[0])
    return res
