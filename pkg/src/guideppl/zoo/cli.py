"""Experiment command line: ``guideppl run <experiment> [flags]``.

Each run writes ``elbo.csv``, ``metrics.json`` and ``params.json`` into the
output directory (plus experiment-specific files such as the QMR graph or
image reconstructions).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from ..estimator import EstimatorConfig
from ..optimize import Adam, ElboLog, OptimizeConfig, forward_sample, importance_sample, optimize
from ..runtime import ParameterStore, run_trace
from . import gmm, images, lda, qmr

EXPERIMENTS = (
    "gmm", "gmm-marginalized", "gmm-meanfield", "bn1", "bn2", "bn2-dep",
    "qmr-joint", "qmr-factored", "qmr-gru", "qmr-ablation",
    "lda-mf", "lda-marginal", "lda-word", "lda-doc", "vae", "sbn",
)

# (steps, step size, batch size); None batch means the full data set
DEFAULTS = {
    "gmm": (200, 0.1, None),
    "bn": (200, 0.1, None),
    "qmr": (1000, 0.01, 20),
    "qmr-ablation": (500, None, 20),
    "lda": (500, 0.01, None),
    "image": (2000, 0.001, 100),
}

ABLATION = (("none", 1e-5, False, False), ("local", 1e-3, True, False), ("baselines", 1e-2, True, True))


class CliError(Exception):
    pass


def _family(exp: str) -> str:
    if exp.startswith("gmm"):
        return "gmm"
    if exp.startswith("bn"):
        return "bn"
    if exp == "qmr-ablation":
        return "qmr-ablation"
    if exp.startswith("qmr"):
        return "qmr"
    if exp.startswith("lda"):
        return "lda"
    return "image"


def parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="guideppl", description="Run guide-program experiments.")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run one experiment")
    r.add_argument("experiment", help="one of: " + ", ".join(EXPERIMENTS))
    r.add_argument("--steps", type=int)
    r.add_argument("--step-size", type=float)
    r.add_argument("--batch-size", type=int)
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--data-seed", type=int, default=0, help="seed for synthetic data sets")
    r.add_argument("--samples", type=int, default=1, help="guide samples per gradient step")
    r.add_argument("--no-local-weights", action="store_true")
    r.add_argument("--no-baselines", action="store_true")
    r.add_argument("--estimator", choices=("unified", "lr", "pw"), default="unified")
    r.add_argument("--data", help="data file (JSON, text corpus or IDX images)")
    r.add_argument("--graph", help="QMR graph JSON file")
    r.add_argument("--limit", type=int, help="use only the first N data items")
    r.add_argument("--out", default="runs/out")
    r.add_argument("--full-scale", action="store_true", help="QMR 200x100 graph with 1000/100 records")
    r.add_argument("--particles", type=int, default=10000, help="importance-sampling particles (GMM NLL)")
    r.add_argument("--fscore-runs", type=int, default=100)
    r.add_argument("--timing", action="store_true", help="fill the ms column of elbo.csv")
    sub.add_parser("list", help="list experiments")
    return p


def _config(args, step_size, per_choice=None, baselines=None, steps=None) -> OptimizeConfig:
    est = EstimatorConfig(
        num_samples=args.samples,
        per_choice_weights=(not args.no_local_weights) if per_choice is None else per_choice,
        baselines=(not args.no_baselines) if baselines is None else baselines,
        kind=args.estimator,
    )
    return OptimizeConfig(steps or args.steps, Adam(step_size), est, seed=args.seed)


def _write_run(out: Path, store: ParameterStore, log: ElboLog, metrics: dict, timing: bool) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "elbo.csv").write_text(log.to_csv(timing))
    (out / "params.json").write_text(store.to_json())
    (out / "metrics.json").write_text(json.dumps(metrics, indent=1, sort_keys=True) + "\n")


def _smoothed(log: ElboLog, window: int = 20) -> float:
    e = log.elbos
    return float(np.mean(e[-min(window, len(e)):]))


def _read_json(path):
    try:
        return json.loads(Path(path).read_text())
    except (OSError, ValueError) as e:
        raise CliError(f"cannot read data file {path}: {e}") from e


# -- experiment families ------------------------------------------------------

def _run_gmm(args, out: Path) -> dict:
    rng = np.random.default_rng(args.data_seed)
    if args.data:
        obj = _read_json(args.data)
        train = np.asarray(obj["train"] if isinstance(obj, dict) else obj, dtype=float)
        test = np.asarray(obj["test"], dtype=float) if isinstance(obj, dict) and "test" in obj else \
            gmm.gmm_generate_data(gmm.DEFAULT_GMM, 100, rng)
    else:
        train = gmm.gmm_generate_data(gmm.DEFAULT_GMM, 100, rng)
        test = gmm.gmm_generate_data(gmm.DEFAULT_GMM, 100, rng)
    if args.limit:
        train = train[:args.limit]
    exp = args.experiment
    if exp.startswith("bn"):
        two = exp != "bn1"
        train = gmm.bn_generate_data(100, rng, two_latents=two) if not args.data else train
        factory = {"bn1": gmm.bn1_model, "bn2": gmm.bn2_model, "bn2-dep": gmm.bn2_dep_model}[exp]
        model = factory(train, args.batch_size)
        store, log = optimize(model, ParameterStore(args.seed), _config(args, args.step_size))
        metrics = {"final_elbo": _smoothed(log), "num_train": len(train)}
        _write_run(out, store, log, metrics, args.timing)
        return metrics
    factory = {"gmm": gmm.gmm_model, "gmm-marginalized": gmm.gmm_marginalized_model,
               "gmm-meanfield": gmm.gmm_meanfield_model}[exp]
    model = factory(train, args.batch_size)
    store, log = optimize(model, ParameterStore(args.seed), _config(args, args.step_size))
    learned = gmm.gmm_learned_params(store)
    exact = float(-gmm.gmm_marginal_log_density(learned, test).sum())
    scratch = store.copy()
    test_model = factory(test, None)
    if exp == "gmm-meanfield":
        # held-out points get fresh (untrained) per-point guides as proposals
        scratch = ParameterStore(args.seed)
        for name in ("theta_x", "mu1", "mu2", "mu3", "s1", "s2", "s3"):
            scratch.set(name, store[name])
        run_trace(test_model, scratch, "guided", 0, record_tape=False)
    res = importance_sample(test_model, scratch, args.particles, rng=args.seed + 1, per_datum=True)
    metrics = {
        "final_elbo": _smoothed(log),
        "test_nll_is": -res.log_z,
        "test_nll_is_per_datum": [-float(v) for v in res.datum_log_z],
        "test_nll_exact_learned": exact,
        "test_nll_true_model": float(-gmm.gmm_marginal_log_density(gmm.DEFAULT_GMM, test).sum()),
        "learned": {"weights": list(learned.weights), "means": list(learned.means), "sigmas": list(learned.sigmas)},
    }
    out.mkdir(parents=True, exist_ok=True)
    (out / "data.json").write_text(json.dumps({"train": train.tolist(), "test": test.tolist()}) + "\n")
    _write_run(out, store, log, metrics, args.timing)
    return metrics


def _qmr_setup(args):
    rng = np.random.default_rng(args.data_seed)
    nc, ne, ntr, nte = (200, 100, 1000, 100) if args.full_scale else (20, 10, 200, 50)
    if args.graph:
        try:
            graph = qmr.QmrGraph.from_json(Path(args.graph).read_text())
        except (OSError, ValueError, KeyError) as e:
            raise CliError(f"cannot read graph file {args.graph}: {e}") from e
    else:
        graph = qmr.qmr_generate_graph(nc, ne, rng)
    if args.data:
        obj = _read_json(args.data)
        train = np.asarray(obj["train"] if isinstance(obj, dict) else obj, dtype=float)
        test = np.asarray(obj["test"], dtype=float) if isinstance(obj, dict) and "test" in obj else \
            qmr.qmr_generate_data(graph, nte, rng)
    else:
        train = qmr.qmr_generate_data(graph, ntr, rng)
        test = qmr.qmr_generate_data(graph, nte, rng)
    if args.limit:
        train = train[:args.limit]
    return graph, train, test


def qmr_fscores(graph, model, store, test, runs: int, seed: int) -> dict:
    """Mean F-score of effects hallucinated from guide-sampled and prior-sampled causes."""
    rng = np.random.default_rng(seed)
    out = {}
    for label, guided in (("guide", True), ("prior", False)):
        scores, skipped = [], 0
        for k in range(runs):
            d, _ = forward_sample(model, store, guided, rng=seed * 7919 + k,
                                  data={"records": test, "batch_size": None})
            s, skipped = qmr.mean_f_score(test, qmr.sample_effects(graph, d, rng))
            scores.append(s)
        out[f"fscore_{label}"] = float(np.mean(scores))
    out["fscore_skipped_records"] = skipped
    return out


def _run_qmr(args, out: Path) -> dict:
    graph, train, test = _qmr_setup(args)
    out.mkdir(parents=True, exist_ok=True)
    (out / "graph.json").write_text(graph.to_json())
    (out / "data.json").write_text(json.dumps({"train": train.astype(int).tolist(),
                                               "test": test.astype(int).tolist()}) + "\n")
    factory = {"qmr-joint": qmr.qmr_joint_model, "qmr-factored": qmr.qmr_factored_model,
               "qmr-gru": qmr.qmr_gru_model}
    if args.experiment == "qmr-ablation":
        metrics = {}
        for tag, alpha, local, base in ABLATION:
            model = qmr.qmr_joint_model(graph, train, args.batch_size)
            cfg = _config(args, args.step_size or alpha, per_choice=local, baselines=base)
            store, log = optimize(model, ParameterStore(args.seed), cfg)
            m = {"final_elbo": _smoothed(log), "step_size": args.step_size or alpha,
                 "local_weights": local, "baselines": base}
            _write_run(out / tag, store, log, m, args.timing)
            metrics[tag] = m
        (out / "metrics.json").write_text(json.dumps(metrics, indent=1, sort_keys=True) + "\n")
        return metrics
    model = factory[args.experiment](graph, train, args.batch_size)
    store, log = optimize(model, ParameterStore(args.seed), _config(args, args.step_size))
    metrics = {"final_elbo": _smoothed(log)}
    metrics.update(qmr_fscores(graph, model, store, test, args.fscore_runs, args.seed))
    _write_run(out, store, log, metrics, args.timing)
    return metrics


def _run_lda(args, out: Path) -> dict:
    if args.data:
        try:
            corpus = lda.load_corpus(args.data)
        except (OSError, ValueError) as e:
            raise CliError(f"cannot read corpus {args.data}: {e}") from e
    else:
        corpus = lda.bundled_corpus()
    if args.limit:
        corpus = lda.Corpus(corpus.vocab_size, corpus.documents[:args.limit], corpus.words)
    factory = {"lda-mf": lda.lda_meanfield_model, "lda-marginal": lda.lda_marginalized_model,
               "lda-word": lda.lda_word_model, "lda-doc": lda.lda_doc_model}[args.experiment]
    model = factory(corpus)
    store, log = optimize(model, ParameterStore(args.seed), _config(args, args.step_size))
    topics, _ = forward_sample(model, store, True, rng=args.seed)
    top = [[corpus.words[i] for i in np.argsort(-row)[:10]] for row in topics.data]
    metrics = {"final_elbo": _smoothed(log), "top_words": top}
    _write_run(out, store, log, metrics, args.timing)
    return metrics


def _run_image(args, out: Path) -> dict:
    try:
        x = images.load_images(args.data, args.limit if args.limit is not None else 1000)
    except (OSError, ValueError) as e:
        raise CliError(f"cannot read images: {e}") from e
    factory = images.vae_model if args.experiment == "vae" else images.sbn_model
    model = factory(x, args.batch_size)
    store, log = optimize(model, ParameterStore(args.seed), _config(args, args.step_size))
    targets = x[:10]
    probs, _ = forward_sample(model, store, True, rng=args.seed, data={"images": targets, "batch_size": None})
    out.mkdir(parents=True, exist_ok=True)
    (out / "reconstructions.json").write_text(json.dumps({
        "targets": targets.astype(int).tolist(),
        "mean_pixels": np.round(probs.data, 6).tolist(),
    }) + "\n")
    metrics = {"final_elbo": _smoothed(log), "num_images": len(x)}
    _write_run(out, store, log, metrics, args.timing)
    return metrics


RUNNERS = {"gmm": _run_gmm, "bn": _run_gmm, "qmr": _run_qmr, "qmr-ablation": _run_qmr,
           "lda": _run_lda, "image": _run_image}


def run(args) -> dict:
    if args.experiment not in EXPERIMENTS:
        raise CliError(f"unknown experiment {args.experiment!r}; choose from {', '.join(EXPERIMENTS)}")
    fam = _family(args.experiment)
    steps, alpha, batch = DEFAULTS[fam]
    if args.steps is None:
        args.steps = steps
    if args.step_size is None:
        args.step_size = alpha
    if args.batch_size is None:
        args.batch_size = batch
    if args.steps < 1 or args.samples < 1:
        raise CliError("--steps and --samples must be >= 1")
    return RUNNERS[fam](args, Path(args.out))


def main(argv=None) -> int:
    args = parser().parse_args(argv)
    if args.command == "list":
        print("\n".join(EXPERIMENTS))
        return 0
    try:
        metrics = run(args)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    final = metrics.get("final_elbo")
    if final is None:
        final = {k: v["final_elbo"] for k, v in metrics.items()}
    print(json.dumps({"experiment": args.experiment, "out": args.out, "final_elbo": final}))
    return 0


if __name__ == "__main__":
    sys.exit(main())
