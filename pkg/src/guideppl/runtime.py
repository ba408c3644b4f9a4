"""Model DSL and trace recorder.

A model is an ordinary Python callable that uses the effects defined here:
:func:`sample`, :func:`observe`, :func:`factor`, :func:`map_data`,
:func:`param` and :func:`model_param`.  :func:`run_trace` executes it under
*guided* semantics (every choice drawn from its guide) or *prior* semantics
(guides ignored) and returns a :class:`Trace`.

Addresses
---------
Each effect gets an address built from call-site frames.  A call site is the
enclosing function name and line number unless an explicit ``name`` is given;
repeated visits to one site under the same prefix are numbered ``#0, #1, ...``.
A mapData iteration pushes a frame holding the datum's index in the data
list.  The structural address erases those datum indices.

Vectorized mapData
------------------
``map_data(data, fn, vectorize=True)`` calls ``fn`` once with the whole
minibatch.  Every effect inside then acts on *lanes*: distributions get a
leading batch axis of the minibatch size, log-densities are per lane, and the
dependency graph holds one node per lane.  This is the same program as the
per-datum loop, evaluated with batched array arithmetic.
"""

from __future__ import annotations

import inspect
import json
import sys
import threading
import zlib
from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np

from . import tensor as T
from .depgraph import DependencyGraph, GraphBuilder, compute_weights
from .dists import Delta, Distribution, ImproperUniform, default_guide_family
from .tensor import ShapeError, Tape, Tensor

__all__ = [
    "Address",
    "ChoiceRecord",
    "ObservationRecord",
    "Trace",
    "ParameterStore",
    "ParameterError",
    "MissingParameterError",
    "SupportMismatchError",
    "DSLError",
    "run_trace",
    "sample",
    "observe",
    "factor",
    "map_data",
    "param",
    "model_param",
    "auto_guide",
    "make_rng",
    "param_scope",
    "in_lanes",
    "lane_count",
]

_LANE = -1  # placeholder datum index of a vectorized iteration frame


class DSLError(RuntimeError):
    """A DSL effect was used incorrectly."""


class ParameterError(ValueError):
    """Parameter re-declared with different dimensions."""


class MissingParameterError(KeyError):
    """A parameter was read but does not exist and creation is disabled."""


class SupportMismatchError(ValueError):
    """A guide's support differs from the model distribution's support."""


def make_rng(seed=None) -> np.random.Generator:
    """Counter-based generator (Philox) from a seed, SeedSequence or Generator."""
    if isinstance(seed, np.random.Generator):
        return seed
    if isinstance(seed, np.random.SeedSequence):
        return np.random.Generator(np.random.Philox(seed))
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))


# -- addresses ------------------------------------------------------------

@dataclass(frozen=True)
class Address:
    """Sequence of ``(site, index, is_iteration)`` frames."""

    path: tuple

    def __str__(self) -> str:
        parts = []
        for site, idx, it in self.path:
            if it:
                parts.append(f"{site}[{'*' if idx is None else idx}]")
            else:
                parts.append(f"{site}#{idx}")
        return "/".join(parts)

    @property
    def structural(self) -> "Address":
        return Address(tuple((s, None if it else i, it) for s, i, it in self.path))

    def with_lane(self, index: int) -> "Address":
        return Address(tuple((s, index if (it and i == _LANE) else i, it) for s, i, it in self.path))

    @property
    def has_lanes(self) -> bool:
        return any(it and i == _LANE for _, i, it in self.path)


# -- records ----------------------------------------------------------------

class _Record:
    lanes: int | None
    lane_index: np.ndarray | None
    address: Address

    @property
    def addresses(self) -> list[Address]:
        if self.lanes is None:
            return [self.address]
        return [self.address.with_lane(int(i)) for i in self.lane_index]

    @property
    def structural(self) -> Address:
        return self.address.structural


class ChoiceRecord(_Record):
    """One executed random choice (possibly over several lanes)."""

    __slots__ = ("address", "model_dist", "guide_dist", "value", "base_noise", "reparameterized",
                 "log_p", "log_q", "scale", "nodes", "lanes", "lane_index", "_terms")

    def __init__(self, address, model_dist, guide_dist, value, base_noise, reparameterized,
                 log_p, log_q, scale, lanes, lane_index):
        self.address = address
        self.model_dist = model_dist
        self.guide_dist = guide_dist
        self.value = value
        self.base_noise = base_noise
        self.reparameterized = reparameterized
        self.log_p = log_p
        self.log_q = log_q
        self.scale = scale
        self.lanes = lanes
        self.lane_index = lane_index
        self.nodes: list = []
        self._terms = None

    kind = "choice"

    def term_values(self) -> np.ndarray:
        """Unscaled per-lane log p - log q as plain reals."""
        if self._terms is None:
            lq = 0.0 if self.log_q is None else self.log_q.data
            self._terms = np.asarray(self.log_p.data - lq, dtype=np.float64)
        return self._terms

    def __repr__(self) -> str:
        return f"ChoiceRecord({self.address}, reparameterized={self.reparameterized})"


class ObservationRecord(_Record):
    """An observe or factor statement."""

    __slots__ = ("address", "kind", "dist", "value", "log_p", "scale", "nodes", "lanes", "lane_index", "_terms")

    def __init__(self, address, kind, dist, value, log_p, scale, lanes, lane_index):
        self.address = address
        self.kind = kind
        self.dist = dist
        self.value = value
        self.log_p = log_p
        self.scale = scale
        self.lanes = lanes
        self.lane_index = lane_index
        self.nodes: list = []
        self._terms = None

    def term_values(self) -> np.ndarray:
        if self._terms is None:
            self._terms = np.asarray(self.log_p.data, dtype=np.float64)
        return self._terms

    def __repr__(self) -> str:
        return f"ObservationRecord({self.kind} {self.address})"


@dataclass
class Trace:
    """Full record of one execution."""

    choices: list
    observations: list
    graph: DependencyGraph
    return_value: Any
    total_log_p: Tensor
    total_log_q: Tensor
    leaves: dict
    tape: Tape | None
    mode: str
    particles: int | None = None
    _weights: tuple | None = field(default=None, repr=False)
    _lane_totals: np.ndarray | None = field(default=None, repr=False)

    @property
    def log_weight(self) -> float:
        """totalLogP - totalLogQ as a plain real (summed over particles)."""
        return float(self.total_log_p.data) - float(self.total_log_q.data)

    @property
    def log_weights(self) -> np.ndarray:
        """One log-ratio per particle (a length-1 array without particles)."""
        if self.particles is None:
            return np.array([self.log_weight])
        return self.lane_totals()

    def lane_totals(self) -> np.ndarray:
        if self._lane_totals is None:
            n = self.particles or 1
            tot = np.zeros(n)
            for r in self.choices + self.observations:
                tot += r.scale * r.term_values()
            self._lane_totals = tot
        return self._lane_totals

    def weights(self) -> tuple[np.ndarray, np.ndarray]:
        """Cached ``compute_weights`` result for this trace's graph."""
        if self._weights is None:
            self._weights = compute_weights(self.graph, self.particles)
        return self._weights

    def per_choice_weight(self, record: ChoiceRecord):
        """w_i for a choice (an array over lanes for lane records)."""
        rel, _ = self.weights()
        if self.particles is not None:
            return rel[record.nodes[0].index]
        w = np.array([rel[n.index] for n in record.nodes])
        return w if record.lanes is not None else float(w[0])

    def global_weight(self, record: ChoiceRecord):
        """Global W with the choice's own downstream terms rescaled like ``per_choice_weight``.

        Without minibatching this is exactly totalLogP - totalLogQ.
        """
        rel, ab = self.weights()
        if self.particles is None:
            w = np.array([ab[0] - ab[n.index] + rel[n.index] for n in record.nodes])
        else:
            # particles are independent executions: every choice sees its own particle's total
            return self.lane_totals().copy()
        return w if record.lanes is not None else float(w[0])


# -- parameter store --------------------------------------------------------

def _normal_init(dims, rng):
    return 0.1 * rng.standard_normal(dims)


class ParameterStore:
    """Named parameter arrays plus optimizer slots and baseline state."""

    def __init__(self, seed: int = 0):
        from .estimator import BaselineStore

        self.seed = int(seed)
        self.values: dict[str, np.ndarray] = {}
        self.dims: dict[str, tuple] = {}
        self.slots: dict[str, dict] = {}
        self.baselines = BaselineStore()
        self.step = 0

    def __contains__(self, name: str) -> bool:
        return name in self.values

    def __getitem__(self, name: str) -> np.ndarray:
        return self.values[name]

    def __len__(self) -> int:
        return len(self.values)

    def names(self) -> list[str]:
        return list(self.values)

    def rng_for(self, name: str) -> np.random.Generator:
        return make_rng(np.random.SeedSequence([self.seed, zlib.crc32(name.encode())]))

    def ensure(self, name: str, dims=None, init: Callable | None = None, create: bool = True) -> np.ndarray:
        if name in self.values:
            if dims is not None and tuple(dims) != self.dims[name]:
                raise ParameterError(f"parameter {name!r} declared with dims {tuple(dims)}, "
                                     f"existing dims {self.dims[name]}")
            return self.values[name]
        if not create:
            raise MissingParameterError(f"missing parameter {name!r}")
        dims = () if dims is None else tuple(int(d) for d in dims)
        init = init or _normal_init
        value = np.asarray(init(dims, self.rng_for(name)), dtype=np.float64)
        if value.shape != dims:
            raise ParameterError(f"initializer for {name!r} produced shape {value.shape}")
        self.values[name] = value
        self.dims[name] = dims
        return value

    def set(self, name: str, value) -> None:
        value = np.array(value, dtype=np.float64)
        if name in self.values and value.shape != self.dims[name]:
            raise ParameterError(f"parameter {name!r} has dims {self.dims[name]}")
        self.values[name] = value
        self.dims[name] = value.shape

    def copy(self) -> "ParameterStore":
        new = ParameterStore(self.seed)
        new.values = {k: v.copy() for k, v in self.values.items()}
        new.dims = dict(self.dims)
        new.slots = {k: {s: np.copy(a) for s, a in d.items()} for k, d in self.slots.items()}
        new.baselines = self.baselines.copy()
        new.step = self.step
        return new

    def to_json(self) -> str:
        """Versioned parameter file: name -> shape and flat row-major values."""
        params = {k: {"shape": list(v.shape), "values": [float(x) for x in v.ravel()]}
                  for k, v in sorted(self.values.items())}
        return json.dumps({"format": "guideppl-params", "version": 1, "params": params}, indent=1) + "\n"

    @classmethod
    def from_json(cls, text: str, seed: int = 0) -> "ParameterStore":
        obj = json.loads(text)
        if obj.get("format") != "guideppl-params" or obj.get("version") != 1:
            raise ValueError("unrecognized parameter file header")
        store = cls(seed)
        for k, entry in obj["params"].items():
            store.set(k, np.asarray(entry["values"], dtype=np.float64).reshape(entry["shape"]))
        return store


# -- execution context -------------------------------------------------------

_local = threading.local()


def _stack() -> list:
    s = getattr(_local, "stack", None)
    if s is None:
        s = _local.stack = []
    return s


def _current() -> "_Context":
    s = _stack()
    if not s:
        raise DSLError("DSL effect used outside run_trace / param_scope")
    return s[-1]


def _site(name: str | None, depth: int = 2) -> str:
    if name is not None:
        return name
    f = sys._getframe(depth)
    return f"{f.f_code.co_name}:{f.f_lineno}"


class _Context:
    """Mutable state of one execution."""

    def __init__(self, store, mode, rng, tape, create, detach_values, trace=True):
        self.store = store
        self.mode = mode
        self.rng = rng
        self.tape = tape
        self.create = create
        self.detach_values = detach_values
        self.leaves: dict[str, Tensor] = {}
        self.model_params: dict[str, Tensor] = {}
        self.prefix: tuple = ()
        self.counters: dict = {}
        self.lanes: int | None = None
        self.lane_index: np.ndarray | None = None
        self.scale = 1.0
        self.builder = GraphBuilder() if trace else None
        self.choices: list = []
        self.observations: list = []
        self.tracing = trace
        self.particles = False
        self.replay: dict | None = None

    def next_address(self, site: str) -> Address:
        key = (self.prefix, site)
        k = self.counters.get(key, 0)
        self.counters[key] = k + 1
        return Address(self.prefix + ((site, k, False),))

    def param(self, name, dims, init):
        leaf = self.leaves.get(name)
        if leaf is not None:
            if dims is not None and tuple(dims) != leaf.shape:
                raise ParameterError(f"parameter {name!r} used with dims {tuple(dims)}, existing {leaf.shape}")
            return leaf
        arr = self.store.ensure(name, dims, init, create=self.create)
        leaf = self.tape.leaf(arr, name) if self.tape is not None else Tensor(arr, name=name)
        self.leaves[name] = leaf
        return leaf


class param_scope:
    """Give :func:`param` access to a store outside of a trace.

    Parameters become leaves of ``tape`` when one is supplied.
    """

    def __init__(self, store: ParameterStore, tape: Tape | None = None, create: bool = True):
        self.ctx = _Context(store, "guided", make_rng(0), tape, create, False, trace=False)

    def __enter__(self):
        _stack().append(self.ctx)
        return self.ctx

    def __exit__(self, *exc):
        _stack().pop()


def in_lanes() -> bool:
    s = _stack()
    return bool(s) and s[-1].lanes is not None


def lane_count() -> int | None:
    s = _stack()
    return s[-1].lanes if s else None


# -- effects -----------------------------------------------------------------

def param(name: str, dims=None, init: Callable | None = None) -> Tensor:
    """Optimizable real-valued parameter (guide side); created on first use."""
    return _current().param(name, dims, init)


def _lane_fit(d: Distribution, lanes: int, what: str) -> Distribution:
    b = d.batch_shape
    if b == ():
        return d.expand(lanes)
    if b != (lanes,):
        raise ShapeError(f"{what} batch shape {b} does not match {lanes} lanes")
    return d


def _check_lp(lp: Tensor, lanes, addr) -> Tensor:
    want = () if lanes is None else (lanes,)
    if lp.shape != want:
        raise ShapeError(f"log-density at {addr} has shape {lp.shape}, expected {want}")
    return lp


def _lane_param_fn(ctx: _Context, addr: Address):
    if ctx.lanes is None or ctx.particles:
        base = str(addr)
        return lambda suffix, dims: ctx.param(f"{base}/{suffix}", dims, None)
    names = [str(a) for a in (addr.with_lane(int(i)) for i in ctx.lane_index)]
    return lambda suffix, dims: T.stack([ctx.param(f"{n}/{suffix}", dims, None) for n in names])


def auto_guide(d: Distribution, addr: Address) -> Distribution:
    """Mean-field guide for ``d`` with parameters named ``"<addr>/<suffix>"``."""
    ctx = _current()
    return default_guide_family(d)(_lane_param_fn(ctx, addr))


def _resolve_guide(guide):
    if guide is None or isinstance(guide, Distribution):
        return guide
    if callable(guide):
        return guide()
    raise DSLError("guide must be a Distribution or a zero-argument callable")


def sample(dist: Distribution, guide=None, name: str | None = None):
    """Random choice.  ``guide`` may be a distribution or a lazy constructor."""
    ctx = _current()
    addr = ctx.next_address(_site(name))
    return _sample_at(ctx, addr, dist, guide, lanes=ctx.lanes)


def _sample_at(ctx: _Context, addr: Address, dist: Distribution, guide, lanes, global_choice=False):
    lane_index = ctx.lane_index if lanes is not None else None
    if ctx.mode == "prior" and not isinstance(dist, ImproperUniform):
        d = _lane_fit(dist, lanes, "model") if lanes else dist
        value = d.sample(ctx.rng)
        log_p = _check_lp(d.log_prob(value), lanes, addr)
        rec = ChoiceRecord(addr, d, None, value, value, False, log_p, None, ctx.scale, lanes, lane_index)
    else:
        g = _resolve_guide(guide)
        if g is None:
            g = default_guide_family(dist)(_lane_param_fn(ctx, addr))
        if not dist.support.matches(g.support):
            raise SupportMismatchError(f"guide {g.family} support {g.support} does not match "
                                       f"{dist.family} support {dist.support} at {addr}")
        if lanes:
            dist = _lane_fit(dist, lanes, "model")
            g = _lane_fit(g, lanes, "guide")
        eps, flag = g.sample_base(ctx.rng)
        if ctx.replay is not None and str(addr) in ctx.replay:
            if flag:
                raise DSLError(f"cannot replay reparameterized choice {addr}")
            eps = _replayed(ctx.replay[str(addr)], eps)
        if flag:
            value = g.transform(eps)
            if ctx.detach_values:
                value = T.detach(value)
        else:
            value = eps
        log_q = _check_lp(g.log_prob(value), lanes, addr)
        log_p = _check_lp(dist.log_prob(value), lanes, addr)
        rec = ChoiceRecord(addr, dist, g, value, eps, bool(flag), log_p, log_q, ctx.scale, lanes, lane_index)
    ctx.choices.append(rec)
    if ctx.builder is not None:
        rec.nodes = ctx.builder.on_global_choice(rec) if global_choice else ctx.builder.on_choice(rec, lanes)
    return rec.value


def _replayed(value, like):
    v = np.asarray(value, dtype=np.asarray(like).dtype)
    if v.shape != np.shape(like):
        raise ShapeError(f"replayed value has shape {v.shape}, expected {np.shape(like)}")
    return v


def model_param(name: str, dims=None, init: Callable | None = None) -> Tensor:
    """Model-side learnable value: ImproperUniform prior with a Delta(param) guide.

    The choice is recorded once per trace under the address ``modelParam:<name>``
    regardless of where it is first used.
    """
    ctx = _current()
    v = ctx.model_params.get(name)
    if v is not None:
        if dims is not None and tuple(dims) != v.shape:
            raise ParameterError(f"model parameter {name!r} used with dims {tuple(dims)}, existing {v.shape}")
        return v
    if not ctx.tracing:
        v = ctx.param(name, dims, init)
    else:
        p = ctx.param(name, dims, init)
        addr = Address(((f"modelParam:{name}", 0, False),))
        scale = ctx.scale
        ctx.scale = 1.0
        try:
            v = _sample_at(ctx, addr, ImproperUniform(p.shape), Delta(p), lanes=None, global_choice=True)
        finally:
            ctx.scale = scale
    ctx.model_params[name] = v
    return v


def _broadcast_value(value, lanes: int):
    if isinstance(value, Tensor):
        return T.repeat_rows(value, lanes)
    v = np.asarray(value)
    return np.broadcast_to(v, (lanes,) + v.shape)


def observe(dist: Distribution, value, name: str | None = None) -> None:
    """Condition on ``value`` under ``dist``."""
    ctx = _current()
    addr = ctx.next_address(_site(name))
    lanes = ctx.lanes
    d = _lane_fit(dist, lanes, "observation") if lanes else dist
    if lanes and np.shape(value.data if isinstance(value, Tensor) else value) == d.event_shape:
        value = _broadcast_value(value, lanes)
    log_p = _check_lp(d.log_prob(value), lanes, addr)
    rec = ObservationRecord(addr, "observe", d, value, log_p, ctx.scale, lanes,
                            ctx.lane_index if lanes else None)
    ctx.observations.append(rec)
    if ctx.builder is not None:
        rec.nodes = ctx.builder.on_observe(rec, lanes)


def factor(score, name: str | None = None) -> None:
    """Add an arbitrary differentiable log-score (per lane inside lanes)."""
    ctx = _current()
    addr = ctx.next_address(_site(name))
    lanes = ctx.lanes
    s = T.as_tensor(score)
    _check_lp(s, lanes, addr)
    if not np.all(np.isfinite(s.data)):
        raise T.DomainError(f"non-finite factor at {addr}")
    rec = ObservationRecord(addr, "factor", None, None, s, ctx.scale, lanes, ctx.lane_index if lanes else None)
    ctx.observations.append(rec)
    if ctx.builder is not None:
        rec.nodes = ctx.builder.on_observe(rec, lanes)


def _arity(fn) -> int:
    try:
        params = inspect.signature(fn).parameters.values()
    except (TypeError, ValueError):
        return 1
    if any(p.kind == p.VAR_POSITIONAL for p in params):
        return 2
    return sum(1 for p in params if p.kind in (p.POSITIONAL_ONLY, p.POSITIONAL_OR_KEYWORD) and p.default is p.empty)


def _take(data, idx: np.ndarray):
    if isinstance(data, np.ndarray):
        return data[idx]
    if isinstance(data, Tensor):
        return data[idx]
    return np.asarray([data[int(i)] for i in idx])


def map_data(data, fn: Callable, batch_size: int | None = None, vectorize: bool = False,
             name: str | None = None) -> list:
    """Run ``fn`` over a uniform without-replacement minibatch of ``data``.

    Log-terms inside are scaled by ``len(data) / batch_size``.  ``fn`` takes
    the datum (and optionally its index).  With ``vectorize=True`` it is
    called once with the stacked minibatch and the index array, and the call's
    return value is returned.
    """
    ctx = _current()
    if ctx.particles:
        raise DSLError("mapData is not supported inside vectorized samples")
    site = _site(name)
    n = len(data)
    if n == 0:
        raise DSLError("mapData over empty data")
    bs = n if batch_size is None else int(batch_size)
    if not 1 <= bs <= n:
        raise DSLError(f"batch size {bs} outside [1, {n}]")
    if bs < n:
        brng = ctx.rng.spawn(1)[0]
        idx = brng.choice(n, size=bs, replace=False)
    else:
        idx = np.arange(n)
    factor_ = n / bs
    k = ctx.counters.get((ctx.prefix, site), 0)
    ctx.counters[(ctx.prefix, site)] = k + 1
    frame_site = f"{site}#{k}"
    with_index = _arity(fn) >= 2
    builder = ctx.builder
    outer_scale = ctx.scale
    outer_prefix = ctx.prefix
    ctx.scale = outer_scale * factor_
    try:
        if vectorize:
            if ctx.lanes is not None:
                raise DSLError("vectorized mapData cannot nest inside another vectorized mapData")
            if builder is not None:
                builder.on_mapdata_begin(factor_, lanes=len(idx))
                builder.on_iter_begin()
            ctx.lanes = len(idx)
            ctx.lane_index = idx
            ctx.prefix = outer_prefix + ((frame_site, _LANE, True),)
            try:
                batch = _take(data, idx)
                result = fn(batch, idx) if with_index else fn(batch)
            finally:
                ctx.lanes = None
                ctx.lane_index = None
                ctx.prefix = outer_prefix
            if builder is not None:
                builder.on_iter_end()
                builder.on_mapdata_end()
            return result
        if builder is not None:
            builder.on_mapdata_begin(factor_)
        results = []
        for i in idx:
            i = int(i)
            if builder is not None:
                builder.on_iter_begin()
            ctx.prefix = outer_prefix + ((frame_site, i, True),)
            try:
                results.append(fn(data[i], i) if with_index else fn(data[i]))
            finally:
                ctx.prefix = outer_prefix
            if builder is not None:
                builder.on_iter_end()
        if builder is not None:
            builder.on_mapdata_end()
        return results
    finally:
        ctx.scale = outer_scale
        ctx.prefix = outer_prefix


# -- running -----------------------------------------------------------------

def _scaled_sum(records, attr) -> Tensor:
    terms = []
    for r in records:
        t = getattr(r, attr)
        if t is None:
            continue
        if t.ndim:
            t = T.tsum(t)
        if r.scale != 1.0:
            t = t * r.scale
        terms.append(t)
    return T.sum_all(terms)


def run_trace(model: Callable, store: ParameterStore | None = None, mode: str = "guided", rng=None,
              data: dict | None = None, *, record_tape: bool = True, create_params: bool = True,
              detach_values: bool = False, particles: int | None = None,
              replay: dict | None = None) -> Trace:
    """Execute ``model(**data)`` and record the trace.

    ``mode`` is ``"guided"`` or ``"prior"``.  ``record_tape=False`` skips
    gradient bookkeeping; ``detach_values=True`` stops gradients flowing
    through reparameterized values (score-function only).

    ``particles=N`` evaluates N independent executions at once as lanes that
    share parameters and addresses.  The model must then be written with
    lane-aware arithmetic (``T.where`` instead of ``if``) and may not use
    mapData.  Totals are sums over particles.

    ``replay`` maps address strings to values that guided non-reparameterized
    choices take instead of their sampled value (log-densities are scored at
    the replayed value).  Used to enumerate discrete programs exactly.
    """
    if mode not in ("guided", "prior"):
        raise ValueError(f"unknown mode {mode!r}")
    store = store if store is not None else ParameterStore()
    tape = Tape() if record_tape else None
    ctx = _Context(store, mode, make_rng(rng), tape, create_params, detach_values)
    ctx.builder.on_start()
    ctx.replay = replay
    if particles is not None:
        if particles < 1:
            raise ValueError("particles must be >= 1")
        ctx.builder.shared_lanes = particles
        ctx.lanes = particles
        ctx.lane_index = np.arange(particles)
        ctx.particles = True
    _stack().append(ctx)
    try:
        if tape is not None:
            with tape:
                ret = model(**data) if data else model()
        else:
            ret = model(**data) if data else model()
    finally:
        _stack().pop()
    graph = ctx.builder.finish()
    total_p = _scaled_sum(ctx.choices, "log_p") if ctx.choices or ctx.observations else T.Tensor(0.0)
    if ctx.observations:
        total_p = T.sum_all([total_p, _scaled_sum(ctx.observations, "log_p")])
    total_q = _scaled_sum(ctx.choices, "log_q")
    return Trace(ctx.choices, ctx.observations, graph, ret, total_p, total_q, ctx.leaves, tape, mode,
                 particles)
