"""QMR-DT style noisy-or diagnosis networks.

A graph has ``C`` causes (diseases) with prior probabilities and ``E``
effects (symptoms), each with a leak probability and a list of parent links.
Three guides are provided: one network predicting every cause jointly,
one small network per cause, and per-cause networks that also read a GRU state
updated with each sampled cause.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .. import tensor as T
from ..dists import Bernoulli
from ..nn import GRU, mlp
from ..runtime import map_data, observe, sample

__all__ = [
    "QmrGraph",
    "qmr_generate_graph",
    "qmr_generate_data",
    "noisy_or_prob",
    "noisy_or_probs",
    "qmr_joint_model",
    "qmr_factored_model",
    "qmr_gru_model",
    "f_score",
    "mean_f_score",
    "sample_effects",
    "GRU_HIDDEN",
]

GRU_HIDDEN = 20


@dataclass
class QmrGraph:
    """Bipartite noisy-or network with the field layout of the JSON file format."""

    disease_nodes: list  # [{"priorProb": p}]
    symptom_nodes: list  # [{"leakProb": l, "parents": [{"index": j, "prob": p}]}]

    def __post_init__(self):
        c = len(self.disease_nodes)
        for d in self.disease_nodes:
            if not 0.0 < d["priorProb"] < 1.0:
                raise ValueError("priorProb must lie in (0, 1)")
        for s in self.symptom_nodes:
            if not 0.0 < s["leakProb"] < 1.0:
                raise ValueError("leakProb must lie in (0, 1)")
            for p in s["parents"]:
                if not 0 <= p["index"] < c:
                    raise ValueError(f"parent index {p['index']} outside [0, {c})")
                if not 0.0 < p["prob"] < 1.0:
                    raise ValueError("link prob must lie in (0, 1)")
        self.prior = np.array([d["priorProb"] for d in self.disease_nodes])
        self.leak = np.array([s["leakProb"] for s in self.symptom_nodes])
        # log(1 - link prob), zero where there is no link
        self.log_keep = np.zeros((len(self.symptom_nodes), c))
        for e, s in enumerate(self.symptom_nodes):
            for p in s["parents"]:
                self.log_keep[e, p["index"]] += np.log1p(-p["prob"])

    @property
    def num_diseases(self) -> int:
        return len(self.disease_nodes)

    @property
    def num_symptoms(self) -> int:
        return len(self.symptom_nodes)

    def to_json(self) -> str:
        return json.dumps({"diseaseNodes": self.disease_nodes, "symptomNodes": self.symptom_nodes}, indent=1) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "QmrGraph":
        obj = json.loads(text)
        return cls(obj["diseaseNodes"], obj["symptomNodes"])


def qmr_generate_graph(n_causes: int, n_effects: int, rng) -> QmrGraph:
    """Random sparse graph: priors U(0.01, 0.2), 1 + Bin(4, 0.5) parents per effect,
    link probs U(0.2, 0.9), leaks U(0.01, 0.1)."""
    if n_causes < 1 or n_effects < 1:
        raise ValueError("graph sizes must be >= 1")
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    diseases = [{"priorProb": float(rng.uniform(0.01, 0.2))} for _ in range(n_causes)]
    symptoms = []
    for _ in range(n_effects):
        k = min(1 + int(rng.binomial(4, 0.5)), n_causes)
        idx = rng.choice(n_causes, size=k, replace=False)
        parents = [{"index": int(j), "prob": float(rng.uniform(0.2, 0.9))} for j in sorted(idx)]
        symptoms.append({"leakProb": float(rng.uniform(0.01, 0.1)), "parents": parents})
    return QmrGraph(diseases, symptoms)


def noisy_or_prob(symptom: dict, diseases) -> float:
    """1 - (1 - leak) * prod over active parents of (1 - prob)."""
    cp = 1.0
    for p in symptom["parents"]:
        if diseases[p["index"]]:
            cp *= 1.0 - p["prob"]
    return 1.0 - (1.0 - symptom["leakProb"]) * cp


def noisy_or_probs(graph: QmrGraph, diseases) -> np.ndarray:
    """Every effect's noisy-or probability; ``diseases`` is (C,) or (B, C) of 0/1."""
    d = np.asarray(diseases, dtype=np.float64)
    cp = np.exp(d @ graph.log_keep.T)
    return 1.0 - (1.0 - graph.leak) * cp


def sample_effects(graph: QmrGraph, diseases, rng) -> np.ndarray:
    p = noisy_or_probs(graph, diseases)
    return (rng.random(p.shape) < p).astype(np.float64)


def qmr_generate_data(graph: QmrGraph, n: int, rng) -> np.ndarray:
    """``n`` forward-simulated records of 0/1 effects, shape (n, E)."""
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    d = rng.random((n, graph.num_diseases)) < graph.prior
    return sample_effects(graph, d, rng)


def _observe_effects(graph: QmrGraph, diseases: list, symptoms: np.ndarray) -> None:
    dmat = np.stack([np.asarray(x, dtype=np.float64) for x in diseases], axis=-1)
    probs = noisy_or_probs(graph, dmat)

    def per_symptom(e):
        observe(Bernoulli(T.Tensor(probs[:, e])), symptoms[:, e], name="symptom")

    map_data(list(range(graph.num_symptoms)), per_symptom, name="symptoms")


def _qmr(graph: QmrGraph, records, batch_size, guide_kind: str):
    records = np.asarray(records, dtype=np.float64)
    C, E = graph.num_diseases, graph.num_symptoms
    if records.ndim != 2 or records.shape[1] != E:
        raise ValueError(f"records must have shape (n, {E})")
    if guide_kind == "joint":
        net = mlp(E, [(C, "sigmoid")], "guideNet")
    elif guide_kind == "factored":
        nets = [mlp(E, [(1, "sigmoid")], f"predictNet_{i}") for i in range(C)]
    else:
        nets = [mlp(E + GRU_HIDDEN, [(1, "sigmoid")], f"predictNet_{i}") for i in range(C)]
        gru = GRU(GRU_HIDDEN, 1, "gru")

    def model(records=records, batch_size=batch_size):
        def per_record(symptoms):
            b = len(symptoms)
            diseases = []
            if guide_kind == "joint":
                probs = net(symptoms)
                for i in range(C):
                    x = sample(Bernoulli(graph.prior[i]), guide=lambda: Bernoulli(probs[:, i]), name="disease")
                    diseases.append(x)
            elif guide_kind == "factored":
                for i in range(C):
                    x = sample(Bernoulli(graph.prior[i]), guide=lambda: Bernoulli(nets[i](symptoms)[:, 0]),
                               name="disease")
                    diseases.append(x)
            else:
                s = T.Tensor(symptoms)
                h = gru.initial_state(b)
                for i in range(C):
                    inp = T.concat([s, h])
                    x = sample(Bernoulli(graph.prior[i]), guide=lambda: Bernoulli(nets[i](inp)[:, 0]),
                               name="disease")
                    h = gru(h, T.Tensor(np.asarray(x, dtype=np.float64)[:, None]))
                    diseases.append(x)
            _observe_effects(graph, diseases, symptoms)
            return np.stack(diseases, axis=-1)

        return map_data(records, per_record, batch_size, vectorize=True, name="records")

    return model


def qmr_joint_model(graph: QmrGraph, records, batch_size: int | None = 20):
    """One network symptoms -> sigmoid cause probabilities guides all causes."""
    return _qmr(graph, records, batch_size, "joint")


def qmr_factored_model(graph: QmrGraph, records, batch_size: int | None = 20):
    """A separate single-output network per cause."""
    return _qmr(graph, records, batch_size, "factored")


def qmr_gru_model(graph: QmrGraph, records, batch_size: int | None = 20):
    """Per-cause networks on [symptoms; GRU state]; the state reads each sampled cause."""
    return _qmr(graph, records, batch_size, "gru")


def f_score(e_true, e_sampled) -> float | None:
    """min(F(true, sampled), F(sampled, true)) with F(a, b) = |a & b| / |a|.

    Returns ``None`` when ``e_true`` has no active entries (undefined).  A
    sample with no active entries scores 0.
    """
    a = np.asarray(e_true).astype(bool)
    b = np.asarray(e_sampled).astype(bool)
    if a.shape != b.shape:
        raise ValueError("effect vectors differ in length")
    if not a.any():
        return None
    if not b.any():
        return 0.0
    hits = float(np.sum(a & b))
    return min(hits / a.sum(), hits / b.sum())


def mean_f_score(e_true: np.ndarray, e_sampled: np.ndarray) -> tuple[float, int]:
    """Mean over records with a defined score, and the number skipped."""
    scores = [f_score(t, s) for t, s in zip(e_true, e_sampled)]
    kept = [s for s in scores if s is not None]
    return (float(np.mean(kept)) if kept else float("nan")), len(scores) - len(kept)
