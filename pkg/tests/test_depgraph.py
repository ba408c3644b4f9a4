"""Dependency-graph construction, downstream sets and per-choice weights."""

import math

import numpy as np
import pytest

from guideppl import tensor as T
from guideppl.depgraph import GraphBuilder, GraphEventError, compute_weights
from guideppl.dists import Bernoulli, Gaussian
from guideppl.runtime import ParameterStore, map_data, model_param, observe, run_trace, sample
from guideppl.zoo.gmm import gmm_model
from guideppl.zoo.qmr import qmr_generate_graph, qmr_joint_model

from oracles import (
    CHAIN_PARAMS,
    PAIR_PARAMS,
    chain_model,
    enumerate_discrete,
    pair_model,
    set_params,
)

PAIR_ADDRS = ["data#0[0]/x#0", "data#0[1]/x#0"]
CHAIN_ADDRS = ["x1#0", "x2#0"]


def fig6_model(data=(0.4, 1.1)):
    """One global choice followed by a two-datum mapData."""
    a = sample(Gaussian(0.0, 1.0), name="a")

    def per_datum(y):
        x = sample(Gaussian(a, 1.0), name="x")
        observe(Gaussian(x, 0.5), y, name="obs")

    map_data(list(data), per_datum, name="data")


def node_of(trace, addr):
    for r in trace.choices + trace.observations:
        if str(r.address) == addr:
            return r.nodes[0]
    raise KeyError(addr)


def term(rec):
    lq = 0.0 if getattr(rec, "log_q", None) is None else float(rec.log_q.data)
    return float(rec.log_p.data) - lq


class TestConstruction:
    def test_linear_chain(self):
        def model():
            u = sample(Gaussian(0.0, 1.0), name="u")
            v = sample(Gaussian(u, 1.0), name="v")
            observe(Gaussian(v, 1.0), 0.3, name="y")

        g = run_trace(model, ParameterStore()).graph
        assert [n.kind for n in g.nodes] == ["root", "choice", "choice", "observe"]
        for i, n in enumerate(g.nodes[1:], start=1):
            assert n.parents == [g.nodes[i - 1]]

    def test_fig6_structure(self):
        tr = run_trace(fig6_model, ParameterStore())
        g = tr.graph
        a = node_of(tr, "a#0")
        x1, o1 = node_of(tr, "data#0[0]/x#0"), node_of(tr, "data#0[0]/obs#0")
        x2, o2 = node_of(tr, "data#0[1]/x#0"), node_of(tr, "data#0[1]/obs#0")
        split = a.children[0]
        assert a.parents == [g.root]
        assert split.kind == "split"
        assert set(split.children) == {x1, x2}
        assert x1.children == [o1] and x2.children == [o2]
        join = split.join
        assert join.kind == "join"
        assert set(join.parents) == {o1, o2}
        assert join.children == []

    def test_nested_split_join(self):
        def model():
            map_data([0, 1], lambda d: map_data([0, 1, 2], lambda e: sample(Bernoulli(0.5), name="b"),
                                                name="inner"), name="outer")

        g = run_trace(model, ParameterStore()).graph
        kinds = [n.kind for n in g.nodes]
        assert kinds.count("split") == 3 and kinds.count("join") == 3
        outer = g.nodes[1]
        inner = [n for n in outer.children]
        assert all(n.kind == "split" for n in inner)
        for s in inner:
            assert len(s.children) == 3
            assert s.join.children == [outer.join]
        assert set(outer.join.parents) == {s.join for s in inner}

    def test_graph_invariants_on_zoo_program(self):
        rng = np.random.default_rng(0)
        graph = qmr_generate_graph(8, 5, rng)
        obs = (rng.random((4, 5)) < 0.4).astype(float)
        tr = run_trace(qmr_joint_model(graph, obs, batch_size=None), ParameterStore(), "guided", 1)
        for n in tr.graph.nodes[1:]:
            assert n.parents
            assert all(p.index < n.index for p in n.parents)

    def test_event_order_guarded(self):
        b = GraphBuilder()
        b.on_start()
        with pytest.raises(GraphEventError):
            b.on_iter_begin()
        b = GraphBuilder()
        b.on_start()
        b.on_mapdata_begin()
        with pytest.raises(GraphEventError):
            b.finish()

    def test_dot_export(self):
        dot = run_trace(fig6_model, ParameterStore()).graph.to_dot()
        assert dot.startswith("digraph")
        assert 'label="split"' in dot and 'label="join"' in dot
        assert dot.count("->") == 8


class TestDownstream:
    def test_fig6_sets(self):
        tr = run_trace(fig6_model, ParameterStore())
        g = tr.graph
        a = node_of(tr, "a#0")
        x1, o1 = node_of(tr, "data#0[0]/x#0"), node_of(tr, "data#0[0]/obs#0")
        o2 = node_of(tr, "data#0[1]/obs#0")
        d = g.downstream(x1)
        assert d == {o1, a.children[0].join}
        assert o2 not in d
        assert g.downstream(a) == set(g.nodes) - {g.root, a}

    def test_last_choice_structural_only(self):
        def model():
            map_data([1.0, 2.0], lambda y: sample(Bernoulli(0.5), name="b"), name="data")

        tr = run_trace(model, ParameterStore())
        d = tr.graph.downstream(tr.choices[-1].nodes[0])
        assert all(n.kind == "join" for n in d) and len(d) == 1

    def test_linear_tail_empty(self):
        tr = run_trace(lambda: sample(Bernoulli(0.5), name="b"), ParameterStore())
        assert tr.graph.downstream(tr.choices[0].nodes[0]) == set()

    @pytest.mark.parametrize("program", ["gmm", "qmr"])
    def test_conservative(self, program):
        """Every later choice not in a sibling iteration is downstream of every earlier one."""
        rng = np.random.default_rng(2)
        if program == "gmm":
            model = gmm_model(rng.standard_normal(5))
        else:
            graph = qmr_generate_graph(6, 4, rng)
            model = qmr_joint_model(graph, (rng.random((3, 4)) < 0.5).astype(float), batch_size=None)
        tr = run_trace(model, ParameterStore(), "guided", 0)
        recs = tr.choices
        checked = 0
        for i, ri in enumerate(recs):
            for k, ni in enumerate(ri.nodes):
                d = tr.graph.downstream(ni)
                for rj in recs[i + 1:]:
                    pi, pj = ri.address.path, rj.address.path
                    sibling = any(fi[0] == fj[0] and fi[2] and fi[1] != fj[1] for fi, fj in zip(pi, pj))
                    if sibling:
                        continue
                    # lane k of a vectorized mapData only reaches lane k of later statements
                    targets = rj.nodes if len(ri.nodes) == 1 else [rj.nodes[k if len(rj.nodes) > 1 else 0]]
                    for nj in targets:
                        assert nj in d, (str(ri.address), str(rj.address))
                        checked += 1
        assert checked > 10


class TestPerChoiceWeights:
    def test_single_choice_single_observe(self):
        tr = run_trace(lambda: observe(Gaussian(2.0 * float(sample(Bernoulli(0.6), name="x")), 1.0), 0.5),
                       ParameterStore(), "guided", 3)
        assert tr.per_choice_weight(tr.choices[0]) == pytest.approx(tr.log_weight, abs=1e-14)

    def test_first_choice_of_chain_is_global(self):
        tr = run_trace(chain_model, set_params(ParameterStore(), CHAIN_PARAMS), "guided", 4)
        first = [c for c in tr.choices if not c.reparameterized][0]
        assert tr.per_choice_weight(first) == pytest.approx(tr.log_weight, abs=1e-14)
        assert tr.global_weight(first) == pytest.approx(tr.log_weight, abs=1e-14)

    def test_fig6_excludes_sibling_iteration(self):
        def model():
            a = sample(Bernoulli(0.5), name="a")

            def per_datum(y):
                x = sample(Bernoulli(0.3 + 0.4 * float(a)), name="x")
                observe(Gaussian(float(x), 0.5), y, name="obs")

            map_data([0.4, 1.1], per_datum, name="data")

        tr = run_trace(model, ParameterStore(), "guided", 5)
        x1 = tr.choices[1]
        o1 = tr.observations[0]
        assert str(x1.address) == "data#0[0]/x#0"
        assert tr.per_choice_weight(x1) == pytest.approx(term(x1) + term(o1), abs=1e-14)
        x2, o2 = tr.choices[2], tr.observations[1]
        assert tr.per_choice_weight(x1) != pytest.approx(term(x1) + term(o1) + term(x2) + term(o2))
        assert tr.per_choice_weight(tr.choices[0]) == pytest.approx(tr.log_weight, abs=1e-14)

    def test_minibatch_scale_folding(self):
        def model():
            def per_datum(y):
                x = sample(Bernoulli(0.5), name="x")
                observe(Gaussian(float(x), 1.0), y, name="obs")

            map_data([0.1, 0.9, 1.3, -0.4], per_datum, batch_size=2, name="data")
            observe(Gaussian(0.0, 1.0), 0.7, name="tail")

        tr = run_trace(model, ParameterStore(), "guided", 6)
        x, obs, tail = tr.choices[0], tr.observations[0], tr.observations[-1]
        assert x.scale == 2.0
        # terms after the mapData enter unscaled; the surrogate's factor scale_i then
        # makes E_batch[sum_{n in B} scale * dlogq_n * tail] = sum_n dlogq_n * tail
        assert tr.per_choice_weight(x) == pytest.approx(term(x) + term(obs) + term(tail), abs=1e-13)
        # absolute downstream sum at the split equals the scale-weighted total
        rel, ab = compute_weights(tr.graph)
        assert ab[0] == pytest.approx(tr.log_weight, abs=1e-12)

    def test_lane_weights_match_scalar_program(self):
        """A vectorized mapData gives the same per-datum weights as the element-wise loop."""
        data = np.array([0.3, 1.7, -0.5])

        def scalar():
            map_data(list(data), lambda y: observe(Gaussian(2.0 * float(sample(Bernoulli(0.4), name="x")), 0.5),
                                                   float(y), name="y"), name="data")

        def vector():
            def per_batch(ys):
                x = sample(Bernoulli(np.full(3, 0.4)), name="x")
                observe(Gaussian(T.where(x, 2.0, 0.0), 0.5), ys, name="y")

            map_data(data, per_batch, vectorize=True, name="data")

        xs = (True, False, True)
        a = run_trace(scalar, ParameterStore(), replay={f"data#0[{i}]/x#0": v for i, v in enumerate(xs)})
        b = run_trace(vector, ParameterStore(), replay={"data#0[-1]/x#0": np.array(xs)})
        wa = [a.per_choice_weight(c) for c in a.choices]
        expected = [term(c) + term(o) for c, o in zip(a.choices, a.observations)]
        np.testing.assert_allclose(wa, expected, atol=1e-14)
        np.testing.assert_allclose(b.per_choice_weight(b.choices[0]), expected, atol=1e-14)


def lr_terms(trace, weight):
    """Per-parameter gradient of sum_i detach(weight_i) * log q_i (score-function part only)."""
    terms = [rec.log_q * float(weight(rec)) for rec in trace.choices if not rec.reparameterized
             and rec.log_q is not None]
    g = T.backward(T.sum_all(terms))
    return {name: float(g[leaf]) for name, leaf in trace.leaves.items()}


def replay_of(trace, addrs):
    vals = {str(c.address): c.value for c in trace.choices}
    return {a: vals[a] for a in addrs}


class TestUpstreamRemoval:
    """Dropping upstream terms w_i(B_i) leaves the expectation unchanged (exact enumeration)."""

    @pytest.mark.parametrize("which", ["chain", "pair"])
    def test_expectations_agree(self, which):
        model, params, addrs = ((chain_model, CHAIN_PARAMS, CHAIN_ADDRS) if which == "chain"
                                else (pair_model, PAIR_PARAMS, PAIR_ADDRS))
        store = set_params(ParameterStore(), params)
        e_loc, e_glob, e_up = {}, {}, {}
        for q, tr in enumerate_discrete(model, store, addrs):
            w = {str(r.address): tr.per_choice_weight(r) for r in tr.choices}
            W = tr.log_weight
            replay = replay_of(tr, addrs)
            # each weighting needs a fresh tape, so the same outcome is replayed
            parts = {
                "loc": lr_terms(tr, lambda r: w[str(r.address)]),
                "glob": lr_terms(run_trace(model, store, replay=replay), lambda r: W),
                "up": lr_terms(run_trace(model, store, replay=replay), lambda r: W - w[str(r.address)]),
            }
            for acc, key in ((e_loc, "loc"), (e_glob, "glob"), (e_up, "up")):
                for k, v in parts[key].items():
                    acc[k] = acc.get(k, 0.0) + q * v
        for k in e_loc:
            assert abs(e_up[k]) < 1e-10, k
            assert abs(e_loc[k] - e_glob[k]) < 1e-10, k
        if which == "pair":
            # the dropped terms are nonzero per outcome, so the check is not vacuous
            tr = next(enumerate_discrete(model, store, addrs))[1]
            assert any(abs(tr.log_weight - tr.per_choice_weight(r)) > 1e-3 for r in tr.choices)


class TestVarianceOrdering:
    def test_local_weights_reduce_variance(self):
        """Per-coordinate variance with w_i is below that with W on the two-datum program."""
        store = set_params(ParameterStore(), PAIR_PARAMS)
        probs, g_local, g_glob = [], [], []
        for q, tr in enumerate_discrete(pair_model, store, PAIR_ADDRS):
            w_local = {str(r.address): tr.per_choice_weight(r) for r in tr.choices}
            W = tr.log_weight
            probs.append(q)
            g_local.append(lr_terms(tr, lambda r: w_local[str(r.address)]))
            tr2 = run_trace(pair_model, store, "guided", 0, replay=replay_of(tr, PAIR_ADDRS))
            g_glob.append(lr_terms(tr2, lambda r: W))
        probs = np.array(probs)
        assert abs(probs.sum() - 1) < 1e-12
        rng = np.random.default_rng(7)
        idx = rng.choice(len(probs), size=10**5, p=probs)
        for k in ("a", "c"):
            loc = np.array([g[k] for g in g_local])
            glo = np.array([g[k] for g in g_glob])
            exact_loc = probs @ loc**2 - (probs @ loc) ** 2
            exact_glo = probs @ glo**2 - (probs @ glo) ** 2
            assert exact_loc < exact_glo
            assert loc[idx].var(ddof=1) < 0.9 * glo[idx].var(ddof=1)
