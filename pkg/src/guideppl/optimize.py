"""Optimization loop, ELBo logging and guide-based inference.

``optimize`` runs stochastic gradient ascent on the ELBo with Adam or SGD.
Each step draws its randomness from a stream keyed by ``(seed, step)`` where
``step`` is the store's global step counter, so a run split into several
``optimize`` calls on the same store reproduces a single long run.

``forward_sample`` executes the model once (guided or prior) and
``importance_sample`` uses guided traces as importance-sampling proposals.
"""

from __future__ import annotations

import io
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .estimator import EstimatorConfig, elbo_gradient
from .runtime import ParameterStore, make_rng, run_trace

__all__ = [
    "Adam",
    "SGD",
    "OptimizeConfig",
    "ElboLog",
    "OptimizationError",
    "optimize",
    "adam_step",
    "sgd_step",
    "forward_sample",
    "importance_sample",
    "ImportanceResult",
    "step_rng",
]


class OptimizationError(RuntimeError):
    """Non-finite gradient or invalid optimizer settings."""


@dataclass(frozen=True)
class Adam:
    alpha: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass(frozen=True)
class SGD:
    alpha: float = 0.01


@dataclass
class OptimizeConfig:
    steps: int = 100
    method: Adam | SGD = field(default_factory=Adam)
    estimator: EstimatorConfig = field(default_factory=EstimatorConfig)
    seed: int = 0
    log_every: int = 1

    def __post_init__(self):
        if self.steps < 1:
            raise OptimizationError("steps must be >= 1")
        if not self.method.alpha > 0:
            raise OptimizationError("step size must be positive")
        if self.log_every < 1:
            raise OptimizationError("log_every must be >= 1")


class ElboLog:
    """Rows of ``(step, elbo, ms)``; ``ms`` is wall time since the run started."""

    def __init__(self):
        self.rows: list[tuple[int, float, int]] = []

    def append(self, step: int, elbo: float, ms: int) -> None:
        if self.rows and step <= self.rows[-1][0]:
            raise ValueError("steps must be strictly increasing")
        self.rows.append((int(step), float(elbo), int(ms)))

    def extend(self, other: "ElboLog") -> None:
        for r in other.rows:
            self.append(*r)

    @property
    def steps(self) -> np.ndarray:
        return np.array([r[0] for r in self.rows], dtype=int)

    @property
    def elbos(self) -> np.ndarray:
        return np.array([r[1] for r in self.rows])

    def __len__(self) -> int:
        return len(self.rows)

    def to_csv(self, timing: bool = True) -> str:
        """CSV text with header ``step,elbo,ms``.

        ``timing=False`` leaves the ms column empty so seeded runs are byte-identical.
        """
        buf = io.StringIO()
        buf.write("step,elbo,ms\n")
        for s, e, ms in self.rows:
            buf.write(f"{s},{e!r},{ms if timing else ''}\n")
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "ElboLog":
        log = cls()
        lines = text.strip().splitlines()
        if not lines or lines[0].strip() != "step,elbo,ms":
            raise ValueError("expected header step,elbo,ms")
        for line in lines[1:]:
            s, e, ms = line.split(",")
            log.append(int(s), float(e), int(ms) if ms else 0)
        return log


def adam_step(store: ParameterStore, grads: dict, alpha: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> None:
    """Bias-corrected Adam ascent step; slots and step counts are kept per parameter."""
    for name, g in grads.items():
        theta = store.values[name]
        g = np.asarray(g, dtype=np.float64)
        if g.shape != theta.shape:
            raise OptimizationError(f"gradient for {name!r} has shape {g.shape}, parameter {theta.shape}")
        slot = store.slots.get(name)
        if slot is None:
            slot = store.slots[name] = {"m": np.zeros_like(theta), "v": np.zeros_like(theta), "t": np.array(0)}
        t = int(slot["t"]) + 1
        m = beta1 * slot["m"] + (1.0 - beta1) * g
        v = beta2 * slot["v"] + (1.0 - beta2) * g * g
        mhat = m / (1.0 - beta1 ** t)
        vhat = v / (1.0 - beta2 ** t)
        store.values[name] = theta + alpha * mhat / (np.sqrt(vhat) + eps)
        slot["m"], slot["v"], slot["t"] = m, v, np.array(t)


def sgd_step(store: ParameterStore, grads: dict, alpha: float) -> None:
    for name, g in grads.items():
        g = np.asarray(g, dtype=np.float64)
        if g.shape != store.values[name].shape:
            raise OptimizationError(f"gradient for {name!r} has the wrong shape")
        store.values[name] = store.values[name] + alpha * g


def step_rng(seed: int, step: int) -> np.random.Generator:
    """Independent stream for global step ``step`` of a run seeded with ``seed``."""
    return make_rng(np.random.SeedSequence(int(seed), spawn_key=(int(step),)))


def optimize(model: Callable, store: ParameterStore | None = None, config: OptimizeConfig | None = None,
             data: dict | None = None, callback: Callable | None = None) -> tuple[ParameterStore, ElboLog]:
    """Maximize the ELBo of ``model`` over the guide (and model) parameters.

    Passing an existing store resumes from its parameters, optimizer state,
    baselines and step counter.  ``callback(step, estimate)`` runs after
    every update.
    """
    config = config or OptimizeConfig()
    store = store if store is not None else ParameterStore(config.seed)
    log = ElboLog()
    t0 = time.perf_counter()
    m = config.method
    for _ in range(config.steps):
        step = store.step + 1
        est = elbo_gradient(model, store, config.estimator, step_rng(config.seed, step), data)
        for name, g in est.grads.items():
            if not np.all(np.isfinite(g)):
                raise OptimizationError(f"non-finite gradient at step {step} for parameter {name!r}")
        if isinstance(m, Adam):
            adam_step(store, est.grads, m.alpha, m.beta1, m.beta2, m.eps)
        else:
            sgd_step(store, est.grads, m.alpha)
        store.step = step
        if step % config.log_every == 0:
            log.append(step, est.elbo, int(round(1000 * (time.perf_counter() - t0))))
        if callback is not None:
            callback(step, est)
    return store, log


def forward_sample(model: Callable, store: ParameterStore, guided: bool = True, rng=None,
                   data: dict | None = None):
    """One execution with the stored parameters; returns ``(return_value, trace)``.

    Referenced parameters must exist (MissingParameterError otherwise).
    """
    tr = run_trace(model, store, "guided" if guided else "prior", rng, data, record_tape=False,
                   create_params=False)
    return tr.return_value, tr


@dataclass
class ImportanceResult:
    log_weights: np.ndarray
    weights: np.ndarray
    log_z: float
    values: list
    traces: list
    datum_log_z: np.ndarray | None = None  # per-datum estimates when ``per_datum=True``

    def expectation(self, f: Callable) -> float:
        """Self-normalized estimate of E[f(return value)]."""
        return float(sum(w * f(v) for w, v in zip(self.weights, self.values)))


def _log_mean_exp(a: np.ndarray, axis=0):
    m = np.max(a, axis=axis, keepdims=True)
    safe = np.where(np.isfinite(m), m, 0.0)
    out = np.log(np.mean(np.exp(a - safe), axis=axis, keepdims=True)) + safe
    return np.squeeze(out, axis=axis)


def _datum_terms(trace) -> tuple[float, dict]:
    """Split a trace's log-ratio into per-datum sums keyed by top-level iteration."""
    glob = 0.0
    per: dict = {}
    for r in trace.choices + trace.observations:
        if r.scale != 1.0:
            raise ValueError("per-datum importance sampling needs full batches")
        frame = next(((s, i) for s, i, it in r.address.path if it), None)
        terms = np.atleast_1d(r.term_values())
        if frame is None:
            glob += float(np.sum(terms))
            continue
        site, idx = frame
        lanes = r.lane_index if (r.lanes is not None and idx == -1) else [idx] * len(terms)
        for i, t in zip(lanes, terms):
            key = (site, int(i))
            per[key] = per.get(key, 0.0) + float(t)
    return glob, per


def importance_sample(model: Callable, store: ParameterStore, n_particles: int, rng=None,
                      data: dict | None = None, per_datum: bool = False, keep_traces: bool = False,
                      vectorize: bool = False) -> ImportanceResult:
    """Importance sampling with the guide as proposal.

    Log-weights are ``totalLogP - totalLogQ``; ``log_z`` is their log-mean-exp.
    A −∞ weight (a proposal with zero model probability) is allowed as long as
    some particle survives.

    ``per_datum=True`` is for models whose only randomness lives inside
    mapData iterations (global values deterministic, e.g. Delta-guided model
    parameters): every particle then supplies one independent proposal per
    datum and ``log_z`` is the sum over data of per-datum log-mean-exp
    estimates.  ``vectorize=True`` draws all particles as lanes of one trace.
    """
    from .dists import ZeroProbabilityError

    if n_particles < 1:
        raise ValueError("n_particles must be >= 1")
    rng = make_rng(rng)
    traces, values = [], []
    if vectorize:
        if per_datum:
            raise ValueError("per_datum and vectorize cannot be combined")
        tr = run_trace(model, store, "guided", rng, data, record_tape=False, create_params=False,
                       particles=n_particles)
        lw = tr.log_weights.copy()
        values = [tr.return_value]
        traces = [tr] if keep_traces else []
    else:
        lw = np.empty(n_particles)
        datum_rows = []
        glob_vals = []
        for k, g in enumerate(rng.spawn(n_particles)):
            try:
                tr = run_trace(model, store, "guided", g, data, record_tape=False, create_params=False)
            except ZeroProbabilityError:
                if per_datum:
                    raise
                lw[k] = -np.inf
                values.append(None)
                continue
            lw[k] = tr.log_weight
            values.append(tr.return_value)
            if keep_traces:
                traces.append(tr)
            if per_datum:
                gl, per = _datum_terms(tr)
                glob_vals.append(gl)
                datum_rows.append(per)
    if not np.any(np.isfinite(lw)):
        raise ValueError("all importance weights are -inf: the guide proposes impossible values")
    lw_safe = np.where(np.isfinite(lw), lw, -np.inf)
    m = np.max(lw_safe)
    w = np.exp(lw_safe - m)
    w /= w.sum()
    if per_datum:
        glob_vals = np.asarray(glob_vals)
        if np.ptp(glob_vals) > 1e-9 * max(1.0, abs(glob_vals[0])):
            raise ValueError("per-datum importance sampling needs deterministic global values")
        keys = sorted(datum_rows[0])
        mat = np.array([[row[k] for k in keys] for row in datum_rows])
        datum = _log_mean_exp(mat, axis=0)
        log_z = float(glob_vals[0] + np.sum(datum))
    else:
        datum = None
        log_z = float(_log_mean_exp(lw_safe))
    return ImportanceResult(lw, w, log_z, values, traces, datum)
