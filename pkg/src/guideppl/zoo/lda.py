"""Latent Dirichlet allocation programs and corpus handling.

Topics and per-document topic distributions are Dirichlet choices guided by
the automatic LogisticNormal guide unless a variant declares its own.  The
outer loop over documents is a plain mapData; the words of one document form
a vectorized mapData.
"""

from __future__ import annotations

from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .. import tensor as T
from ..dists import Dirichlet, Discrete, LogisticNormal
from ..nn import RNN, ConstantParams, mlp
from ..runtime import factor, map_data, observe, sample

__all__ = [
    "Corpus",
    "load_corpus",
    "bundled_corpus",
    "generate_corpus",
    "lda_models",
    "lda_meanfield_model",
    "lda_marginalized_model",
    "lda_word_model",
    "lda_doc_model",
    "DOC_HIDDEN",
    "WORD_HIDDEN",
]

DOC_HIDDEN = 20
WORD_HIDDEN = 50


@dataclass
class Corpus:
    vocab_size: int
    documents: list  # list of int arrays of word indices
    words: list | None = None  # index -> token string

    def __post_init__(self):
        self.documents = [np.asarray(d, dtype=np.intp) for d in self.documents]
        for d in self.documents:
            if d.ndim != 1 or len(d) == 0:
                raise ValueError("documents must be nonempty index lists")
            if np.any(d < 0) or np.any(d >= self.vocab_size):
                raise ValueError("word index outside the vocabulary")

    @property
    def counts(self) -> np.ndarray:
        """Per-document word-count vectors, shape (D, V)."""
        out = np.zeros((len(self.documents), self.vocab_size))
        for k, d in enumerate(self.documents):
            np.add.at(out[k], d, 1.0)
        return out

    def __len__(self) -> int:
        return len(self.documents)


def load_corpus(path) -> Corpus:
    """Whitespace-tokenized text, one document per line; the vocabulary is built in first-seen order."""
    vocab: dict[str, int] = {}
    docs = []
    for line in Path(path).read_text().splitlines():
        toks = line.split()
        if not toks:
            continue
        docs.append([vocab.setdefault(t, len(vocab)) for t in toks])
    if not docs:
        raise ValueError(f"no documents in {path}")
    words = sorted(vocab, key=vocab.get)
    return Corpus(len(vocab), docs, words)


def generate_corpus(n_docs: int = 50, vocab_size: int = 200, n_topics: int = 5, doc_len=(30, 60),
                    alpha: float = 0.5, eta: float = 0.1, seed: int = 0) -> tuple[Corpus, np.ndarray]:
    """Draw a corpus from LDA with the given hyperparameters; returns (corpus, topics)."""
    rng = np.random.default_rng(seed)
    topics = rng.dirichlet(np.full(vocab_size, eta), size=n_topics)
    docs = []
    for _ in range(n_docs):
        theta = rng.dirichlet(np.full(n_topics, alpha))
        n = int(rng.integers(doc_len[0], doc_len[1] + 1))
        z = rng.choice(n_topics, size=n, p=theta)
        docs.append([int(rng.choice(vocab_size, p=topics[k])) for k in z])
    return Corpus(vocab_size, docs, [f"w{i:03d}" for i in range(vocab_size)]), topics


def bundled_corpus() -> Corpus:
    """The 50-document synthetic corpus shipped with the package (vocab 200, 5 topics)."""
    ref = resources.files("guideppl.zoo") / "data" / "lda_synthetic.txt"
    with resources.as_file(ref) as p:
        corpus = load_corpus(p)
    # tokens are w000..w199; index by token number so topics stay aligned with the generator
    remap = np.array([int(w[1:]) for w in corpus.words])
    return Corpus(200, [remap[d] for d in corpus.documents], [f"w{i:03d}" for i in range(200)])


def _topics(num_topics: int, vocab: int, eta):
    eta_v = np.full(vocab, float(eta)) if np.ndim(eta) == 0 else np.asarray(eta, dtype=float)
    return T.stack([sample(Dirichlet(eta_v), name="topic") for _ in range(num_topics)])


def _alpha_vec(alpha, k):
    return np.full(k, float(alpha)) if np.ndim(alpha) == 0 else np.asarray(alpha, dtype=float)


def lda_meanfield_model(corpus: Corpus, num_topics: int = 5, alpha=1.0, eta=1.0):
    """Mean-field guides for topics, topic distributions and every word's topic."""

    def model(corpus=corpus):
        topics = _topics(num_topics, corpus.vocab_size, eta)

        def per_doc(doc):
            theta = sample(Dirichlet(_alpha_vec(alpha, num_topics)), name="topicDist")

            def per_words(words):
                z = sample(Discrete(theta), name="z")
                observe(Discrete(topics[z]), words, name="w")

            map_data(doc, per_words, vectorize=True, name="words")

        map_data(corpus.documents, per_doc, name="docs")
        return topics

    return model


def lda_marginalized_model(corpus: Corpus, num_topics: int = 5, alpha=1.0, eta=1.0):
    """Word topics summed out: each distinct word adds count * log sum_z theta_z topic_z[word].

    The per-word factors of one document are accumulated into a single
    factor statement, which has the same total score.
    """

    def model(corpus=corpus):
        topics = _topics(num_topics, corpus.vocab_size, eta)
        counts = corpus.counts

        def per_doc(doc, k):
            theta = sample(Dirichlet(_alpha_vec(alpha, num_topics)), name="topicDist")
            c = counts[k]
            present = np.nonzero(c)[0]
            probs = T.matmul(theta, T.get(topics, (slice(None), present)))
            factor(T.tsum(T.log(probs) * T.Tensor(c[present])), name="words")

        map_data(corpus.documents, per_doc, name="docs")
        return topics

    return model


def lda_word_model(corpus: Corpus, num_topics: int = 5, alpha=1.0, eta=1.0):
    """Amortized word-level guide: embedding(word) and topicDist - 1 feed a network emitting softplus weights."""
    embed = mlp(corpus.vocab_size, [(WORD_HIDDEN, "tanh")], "embedNet")
    net = mlp(WORD_HIDDEN + num_topics, [(WORD_HIDDEN, "tanh"), (num_topics, None)], "net")
    eye = np.eye(corpus.vocab_size)

    def model(corpus=corpus):
        topics = _topics(num_topics, corpus.vocab_size, eta)

        def per_doc(doc):
            theta = sample(Dirichlet(_alpha_vec(alpha, num_topics)), name="topicDist")

            def per_words(words):
                def guide():
                    e = embed(T.Tensor(eye[words]))
                    out = net(T.concat([e, T.repeat_rows(theta - 1.0, len(words))]))
                    return Discrete(T.softplus(out))

                z = sample(Discrete(theta), guide=guide, name="z")
                observe(Discrete(topics[z]), words, name="w")

            map_data(doc, per_words, vectorize=True, name="words")

        map_data(corpus.documents, per_doc, name="docs")
        return topics

    return model


def lda_doc_model(corpus: Corpus, num_topics: int = 5, alpha=1.0, eta=1.0):
    """Amortized document-level guide: an RNN reads the topics then the normalized counts."""
    V, K, H = corpus.vocab_size, num_topics, DOC_HIDDEN
    init = ConstantParams([H], "init")
    ru = RNN(H, V, "ru")
    out_hidden = mlp(H, [(H, "tanh")], "outputHidden")
    out_mu = mlp(H, [(K - 1, None)], "outputMu")
    out_sigma = mlp(H, [(K - 1, None)], "outputSigma")

    def guide_params(topics, doc_counts):
        state = init()
        for k in range(K):
            state = ru(state, topics[k])
        state = ru(state, T.Tensor(doc_counts / doc_counts.sum()))
        hidden = out_hidden(state)
        return out_mu(hidden), T.softplus(out_sigma(hidden))

    def model(corpus=corpus):
        topics = _topics(K, V, eta)
        counts = corpus.counts

        def per_doc(doc, k):
            theta = sample(Dirichlet(_alpha_vec(alpha, K)),
                           guide=lambda: LogisticNormal(*guide_params(topics, counts[k])), name="topicDist")

            def per_words(words):
                z = sample(Discrete(theta), name="z")
                observe(Discrete(topics[z]), words, name="w")

            map_data(doc, per_words, vectorize=True, name="words")

        map_data(corpus.documents, per_doc, name="docs")
        return topics

    return model


def lda_models(corpus: Corpus, num_topics: int = 5, alpha=1.0, eta=1.0) -> dict:
    return {
        "meanField": lda_meanfield_model(corpus, num_topics, alpha, eta),
        "marginalized": lda_marginalized_model(corpus, num_topics, alpha, eta),
        "wordLevel": lda_word_model(corpus, num_topics, alpha, eta),
        "docLevel": lda_doc_model(corpus, num_topics, alpha, eta),
    }
