"""ELBo gradient estimators.

The unified estimator differentiates the surrogate

    S = totalLogP - sum_{i in C} scale_i log q_i
        + sum_{i in D} scale_i log q_i * const(w_i - b_i)

where C holds the reparameterized choices and D the rest.  Its gradient is
the pathwise term for C plus the likelihood-ratio term for D; the discrete
``log q`` factors are left out of the pathwise part because their expected
gradient is zero.  ``w_i`` is the per-choice downstream weight from the
dependency graph (or the global log-ratio W) and ``b_i`` a moving-average
baseline.

``lr_gradient`` and ``pw_gradient`` are the plain reference estimators.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import tensor as T
from .tensor import Tensor

__all__ = [
    "EstimatorConfig",
    "BaselineStore",
    "GradientEstimate",
    "EstimatorError",
    "elbo_gradient",
    "lr_gradient",
    "pw_gradient",
    "surrogate",
]

KINDS = ("unified", "lr", "pw")


class EstimatorError(ValueError):
    """Invalid estimator configuration or a non-finite surrogate."""


@dataclass
class EstimatorConfig:
    """``vectorize_samples`` runs all samples of a step as particle lanes of one trace."""

    num_samples: int = 1
    per_choice_weights: bool = True
    baselines: bool = True
    kind: str = "unified"
    vectorize_samples: bool = False

    def __post_init__(self):
        if self.num_samples < 1:
            raise EstimatorError("num_samples must be >= 1")
        if self.kind not in KINDS:
            raise EstimatorError(f"unknown estimator kind {self.kind!r}")


class BaselineStore:
    """Moving-average baselines keyed by structural address."""

    def __init__(self, rho: float = 0.9):
        if not 0.0 < rho < 1.0:
            raise ValueError("rho must lie in (0, 1)")
        self.rho = rho
        self.entries: dict[str, float] = {}

    def get(self, key: str) -> float:
        return self.entries.get(key, 0.0)

    def update(self, key: str, w: float) -> float:
        w = float(w)
        if not np.isfinite(w):
            raise EstimatorError(f"non-finite baseline sample at {key}")
        old = self.entries.get(key)
        new = w if old is None else self.rho * old + (1.0 - self.rho) * w
        self.entries[key] = new
        return new

    def update_many(self, key: str, ws) -> float:
        """Sequential updates with every entry of ``ws`` in order (closed form)."""
        ws = np.asarray(ws, dtype=np.float64).ravel()
        if not np.all(np.isfinite(ws)):
            raise EstimatorError(f"non-finite baseline sample at {key}")
        if len(ws) == 0:
            return self.get(key)
        old = self.entries.get(key)
        if old is None:
            old, ws = float(ws[0]), ws[1:]
        n = len(ws)
        decay = self.rho ** np.arange(n - 1, -1, -1)
        new = float(self.rho ** n * old + (1.0 - self.rho) * np.dot(decay, ws))
        self.entries[key] = new
        return new

    def __contains__(self, key: str) -> bool:
        return key in self.entries

    def __len__(self) -> int:
        return len(self.entries)

    def copy(self) -> "BaselineStore":
        b = BaselineStore(self.rho)
        b.entries = dict(self.entries)
        return b


@dataclass
class GradientEstimate:
    grads: dict
    elbo: float
    log_weights: np.ndarray = field(default_factory=lambda: np.zeros(0))
    traces: list = field(default_factory=list)


def _offender(trace) -> str:
    for r in trace.choices:
        for t in (r.log_p, r.log_q):
            if t is not None and not np.all(np.isfinite(t.data)):
                return str(r.address)
    for r in trace.observations:
        if not np.all(np.isfinite(r.log_p.data)):
            return str(r.address)
    return "<unknown>"


def _lr_term(rec, coef) -> Tensor:
    c = np.asarray(coef, dtype=np.float64) * rec.scale
    if rec.log_q.ndim:
        return T.tsum(rec.log_q * Tensor(c))
    return rec.log_q * float(c)


def surrogate(trace, config: EstimatorConfig, baselines: BaselineStore | None = None) -> tuple[Tensor, list]:
    """Surrogate scalar of one trace and the pending baseline updates.

    Returns ``(S, updates)`` where ``updates`` lists ``(key, w_values)`` to be
    fed to the baseline store once gradients are taken.
    """
    updates = []
    if config.kind == "pw":
        for r in trace.choices:
            if not r.reparameterized:
                raise EstimatorError(f"pathwise estimator needs reparameterized choices; {r.address} is not")
        return T.sum_all([trace.total_log_p, -trace.total_log_q]), updates
    if config.kind == "lr":
        terms = [_lr_term(r, trace.global_weight(r)) for r in trace.choices if r.log_q is not None]
        return T.sum_all(terms), updates
    terms = [trace.total_log_p]
    for r in trace.choices:
        if r.log_q is None:
            continue
        if r.reparameterized:
            lq = T.tsum(r.log_q) if r.log_q.ndim else r.log_q
            terms.append(lq * (-r.scale) if r.scale != 1.0 else -lq)
            continue
        w = trace.per_choice_weight(r) if config.per_choice_weights else trace.global_weight(r)
        b = 0.0
        if config.baselines and baselines is not None:
            key = str(r.structural)
            b = baselines.get(key)
            updates.append((key, w))
        terms.append(_lr_term(r, np.asarray(w) - b))
    return T.sum_all(terms), updates


def trace_gradient(trace, config: EstimatorConfig, baselines: BaselineStore | None = None) -> tuple[dict, list]:
    """Gradient of one trace's surrogate w.r.t. every parameter it touched.

    Returns ``(grads, updates)``; baselines are read but not updated.
    Parameters the surrogate does not depend on get zero gradients.
    """
    s, upd = surrogate(trace, config, baselines)
    if not np.isfinite(s.data):
        if trace.tape is not None:
            trace.tape.clear()
        raise EstimatorError(f"non-finite surrogate at {_offender(trace)}")
    grads = {}
    if s.tape is not None:
        leaf_grads = T.backward(s)
        for name, leaf in trace.leaves.items():
            gv = leaf_grads.get(leaf)
            grads[name] = np.zeros_like(leaf.data) if gv is None else gv
    else:
        if trace.tape is not None:
            trace.tape.clear()
        for name, leaf in trace.leaves.items():
            grads[name] = np.zeros_like(leaf.data)
    return grads, upd


def elbo_gradient(model: Callable, store, config: EstimatorConfig | None = None, rng=None,
                  data: dict | None = None, keep_traces: bool = False) -> GradientEstimate:
    """Average surrogate gradient over ``config.num_samples`` guided traces."""
    from .runtime import make_rng, run_trace

    config = config or EstimatorConfig()
    rng = make_rng(rng)
    detach = config.kind == "lr"
    if config.vectorize_samples:
        streams = [rng]
        per_trace = config.num_samples
    else:
        streams = rng.spawn(config.num_samples) if config.num_samples > 1 else [rng]
        per_trace = None
    grads: dict[str, np.ndarray] = {}
    log_w = []
    pending = []
    traces = []
    for g in streams:
        tr = run_trace(model, store, "guided", g, data, detach_values=detach, particles=per_trace)
        g_tr, upd = trace_gradient(tr, config, store.baselines)
        pending.extend(upd)
        log_w.append(tr.log_weights)
        for name, gv in g_tr.items():
            acc = grads.get(name)
            grads[name] = gv.copy() if acc is None else acc + gv
        if keep_traces:
            traces.append(tr)
    n = config.num_samples
    for name in grads:
        grads[name] /= n
    for key, w in pending:
        store.baselines.update_many(key, w)
    log_w = np.concatenate(log_w)
    return GradientEstimate(grads, float(np.mean(log_w)), log_w, traces)


def lr_gradient(model: Callable, store, rng=None, data: dict | None = None, num_samples: int = 1,
                vectorize_samples: bool = False) -> GradientEstimate:
    """Score-function estimator with the global weight on every choice.

    Values are detached, so parameters reached only through reparameterized
    values (including Delta-guided model parameters) receive zero gradient.
    """
    cfg = EstimatorConfig(num_samples, per_choice_weights=False, baselines=False, kind="lr",
                          vectorize_samples=vectorize_samples)
    return elbo_gradient(model, store, cfg, rng, data)


def pw_gradient(model: Callable, store, rng=None, data: dict | None = None, num_samples: int = 1,
                vectorize_samples: bool = False) -> GradientEstimate:
    """Pathwise estimator: gradient of totalLogP - totalLogQ through the transforms."""
    cfg = EstimatorConfig(num_samples, per_choice_weights=False, baselines=False, kind="pw",
                          vectorize_samples=vectorize_samples)
    return elbo_gradient(model, store, cfg, rng, data)
