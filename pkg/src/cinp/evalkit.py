"""Dataset splitting, linear probing, and classification metrics."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (AucOnMulticlass, DegenerateLabels, LengthMismatch,
                     ShapeMismatch, TooFewSamples)
from .seeds import stream_rng

Array = np.ndarray


# ---------------------------------------------------------------------------
# splitting
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SplitSpec:
    """Train/val/test ratios (must sum to 1) plus the shuffle seed."""

    ratios: tuple[float, float, float] = (0.70, 0.10, 0.20)
    seed: int = 0
    stratified: bool = True

    def __post_init__(self):
        if len(self.ratios) != 3 or any(r < 0 for r in self.ratios):
            raise TooFewSamples(f"SplitSpec: bad ratios {self.ratios}")
        if abs(sum(self.ratios) - 1.0) >= 1e-12:
            raise TooFewSamples(f"SplitSpec: ratios {self.ratios} do not sum to 1")


def _allot(n: int, ratios: tuple[float, float, float]) -> list[int]:
    """Largest-remainder rounding of n into three parts."""
    exact = [n * r for r in ratios]
    counts = [int(x) for x in exact]
    remainder = n - sum(counts)
    # distribute leftovers by largest fractional part, ties toward earlier splits
    order = sorted(range(3), key=lambda i: (-(exact[i] - counts[i]), i))
    for i in range(remainder):
        counts[order[i % 3]] += 1
    return counts


def split_dataset(samples: list, spec: SplitSpec,
                  labels: list[int] | None = None) -> tuple[list, list, list]:
    """Seeded (stratified) partition into train/val/test.

    With stratification, per-class counts follow largest-remainder rounding
    of the ratios, so every split's class proportions sit within one
    subject of the global ones. Output order is the original sample order.
    """
    n = len(samples)
    if labels is None:
        labels = [s.label for s in samples]
    if len(labels) != n:
        raise LengthMismatch("split_dataset: labels length mismatch")
    if spec.stratified and n < 10:
        raise TooFewSamples(f"split_dataset: {n} samples is too few to stratify")

    groups: dict[int, list[int]]
    if spec.stratified:
        groups = {}
        for i, y in enumerate(labels):
            groups.setdefault(int(y), []).append(i)
    else:
        groups = {0: list(range(n))}

    membership = np.empty(n, dtype=np.intp)
    for label in sorted(groups):
        idx = np.asarray(groups[label], dtype=np.intp)
        order = stream_rng(spec.seed, "split", label).permutation(idx.size)
        shuffled = idx[order]
        n_train, n_val, _ = _allot(idx.size, spec.ratios)
        membership[shuffled[:n_train]] = 0
        membership[shuffled[n_train:n_train + n_val]] = 1
        membership[shuffled[n_train + n_val:]] = 2
    train = [samples[i] for i in range(n) if membership[i] == 0]
    val = [samples[i] for i in range(n) if membership[i] == 1]
    test = [samples[i] for i in range(n) if membership[i] == 2]
    return train, val, test


# ---------------------------------------------------------------------------
# embeddings container
# ---------------------------------------------------------------------------

EMBED_MAGIC = b"CEMB"
EMBED_VERSION = 1


@dataclass
class EmbeddingSet:
    """Row-aligned embeddings with subject ids and labels."""

    subject_ids: list[str]
    labels: Array
    embeddings: Array

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.embeddings = np.ascontiguousarray(self.embeddings, dtype=np.float64)
        n = len(self.subject_ids)
        if self.labels.shape != (n,) or self.embeddings.shape[0] != n:
            raise ShapeMismatch("EmbeddingSet: row counts disagree")

    def by_class(self) -> dict[int, Array]:
        return {int(c): self.embeddings[self.labels == c]
                for c in np.unique(self.labels)}

    def ids_by_class(self) -> dict[int, list[str]]:
        out: dict[int, list[str]] = {}
        for sid, y in zip(self.subject_ids, self.labels):
            out.setdefault(int(y), []).append(sid)
        return out

    def save(self, path: str | Path) -> None:
        """JSON header (ids, labels, shape) followed by the raw f64 payload."""
        header = json.dumps({
            "version": EMBED_VERSION,
            "n": len(self.subject_ids),
            "dim": int(self.embeddings.shape[1]),
            "subject_ids": self.subject_ids,
            "labels": self.labels.tolist(),
            "dtype": "float64",
            "byte_order": "little",
        }, sort_keys=True).encode()
        with open(path, "wb") as fh:
            fh.write(EMBED_MAGIC)
            fh.write(len(header).to_bytes(8, "little"))
            fh.write(header)
            fh.write(self.embeddings.astype("<f8").tobytes())

    @classmethod
    def load(cls, path: str | Path) -> "EmbeddingSet":
        blob = Path(path).read_bytes()
        if blob[:4] != EMBED_MAGIC:
            raise ShapeMismatch(f"EmbeddingSet: bad magic in {path}")
        hlen = int.from_bytes(blob[4:12], "little")
        header = json.loads(blob[12:12 + hlen])
        payload = np.frombuffer(blob[12 + hlen:], dtype="<f8")
        emb = payload.reshape(header["n"], header["dim"]).copy()
        return cls(subject_ids=header["subject_ids"],
                   labels=np.asarray(header["labels"]), embeddings=emb)


# ---------------------------------------------------------------------------
# linear probe
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ProbeCfg:
    l2: float = 1e-3
    epochs: int = 2000
    lr: float = 0.5
    seed: int = 0


@dataclass
class ProbeModel:
    """Multinomial logistic regression weights over frozen embeddings."""

    weights: Array  # (k, d)
    bias: Array     # (k,)

    def logits(self, embeddings: Array) -> Array:
        return embeddings @ self.weights.T + self.bias

    def predict(self, embeddings: Array) -> Array:
        return np.argmax(self.logits(embeddings), axis=1)

    def scores(self, embeddings: Array) -> Array:
        """Softmax probability of class 1 (binary problems)."""
        z = self.logits(embeddings)
        z = z - z.max(axis=1, keepdims=True)
        p = np.exp(z)
        p /= p.sum(axis=1, keepdims=True)
        return p[:, 1]


def probe_loss_grad(weights: Array, bias: Array, embeddings: Array,
                    labels: Array, l2: float) -> tuple[float, Array, Array]:
    """Mean cross-entropy + l2/2 ||W||^2 and its analytic gradient."""
    n = embeddings.shape[0]
    z = embeddings @ weights.T + bias
    z = z - z.max(axis=1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=1, keepdims=True)
    nll = -np.mean(np.log(p[np.arange(n), labels]))
    loss = nll + 0.5 * l2 * float(np.sum(weights * weights))
    delta = p.copy()
    delta[np.arange(n), labels] -= 1.0
    gw = delta.T @ embeddings / n + l2 * weights
    gb = delta.sum(axis=0) / n
    return loss, gw, gb


def linear_probe_fit(embeddings: Array, labels, cfg: ProbeCfg = ProbeCfg(),
                     n_classes: int | None = None) -> ProbeModel:
    """Full-batch gradient descent to convergence (grad norm < 1e-6 or cap).

    The objective is strictly convex for l2 > 0, so the fit is independent
    of the seed up to the convergence tolerance.
    """
    embeddings = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if embeddings.ndim != 2 or labels.shape != (embeddings.shape[0],):
        raise ShapeMismatch("linear_probe_fit: bad embedding/label shapes")
    k = n_classes if n_classes is not None else int(labels.max()) + 1
    if embeddings.shape[0] < k:
        raise TooFewSamples("linear_probe_fit: fewer samples than classes")
    present = np.unique(labels)
    if len(present) != k or present[0] != 0 or present[-1] != k - 1:
        raise DegenerateLabels(
            f"linear_probe_fit: classes {present.tolist()} do not cover 0..{k - 1}")

    rng = np.random.default_rng(cfg.seed)
    w = rng.standard_normal((k, embeddings.shape[1])) * 0.01
    b = np.zeros(k)
    for _ in range(cfg.epochs):
        _, gw, gb = probe_loss_grad(w, b, embeddings, labels, cfg.l2)
        gn = max(np.max(np.abs(gw)), np.max(np.abs(gb)))
        if gn < 1e-6:
            break
        w -= cfg.lr * gw
        b -= cfg.lr * gb
    return ProbeModel(weights=w, bias=b)


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

@dataclass
class MetricsReport:
    acc: float
    mcc: float
    n: int
    confusion: Array
    auc: float | None = None

    def as_dict(self) -> dict:
        return {
            "acc": self.acc,
            "auc": self.auc,
            "mcc": self.mcc,
            "n": self.n,
            "confusion": self.confusion.tolist(),
        }

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), sort_keys=True, indent=2) + "\n"


def auc_score(scores, labels) -> float | None:
    """Mann-Whitney AUC with 0.5 credit for ties; None if a class is absent."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if scores.shape != labels.shape:
        raise LengthMismatch("auc_score: scores/labels length mismatch")
    if np.any((labels != 0) & (labels != 1)):
        raise AucOnMulticlass("auc_score: labels must be binary 0/1")
    n1 = int(labels.sum())
    n0 = labels.size - n1
    if n0 == 0 or n1 == 0:
        return None
    order = np.argsort(scores, kind="stable")
    ranks = np.empty(scores.size, dtype=np.float64)
    sorted_scores = scores[order]
    i = 0
    while i < scores.size:
        j = i
        while j + 1 < scores.size and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0  # average rank, 1-based
        i = j + 1
    r1 = float(ranks[labels == 1].sum())
    return (r1 - n1 * (n1 + 1) / 2.0) / (n0 * n1)


def mcc_score(confusion: Array) -> float:
    """Multiclass Matthews correlation (Gorodkin form); 0 on zero denominator."""
    c = np.asarray(confusion, dtype=np.float64)
    s = c.sum()
    correct = np.trace(c)
    true_tot = c.sum(axis=1)
    pred_tot = c.sum(axis=0)
    num = correct * s - float(true_tot @ pred_tot)
    den_sq = (s * s - float(pred_tot @ pred_tot)) * (s * s - float(true_tot @ true_tot))
    if den_sq <= 0.0:
        return 0.0
    return num / math.sqrt(den_sq)


def metrics_compute(preds, labels, scores=None, n_classes: int | None = None,
                    ) -> MetricsReport:
    """ACC / MCC from predictions; AUC from scores when binary."""
    preds = np.asarray(preds, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if preds.shape != labels.shape or preds.ndim != 1:
        raise LengthMismatch("metrics_compute: preds/labels length mismatch")
    k = n_classes if n_classes is not None else int(max(preds.max(), labels.max())) + 1
    confusion = np.zeros((k, k), dtype=np.int64)
    for t, p in zip(labels, preds):
        confusion[t, p] += 1
    acc = float(np.trace(confusion)) / labels.size
    auc = None
    if scores is not None:
        if k > 2:
            raise AucOnMulticlass("metrics_compute: AUC requested for k > 2")
        auc = auc_score(scores, labels)
    return MetricsReport(acc=acc, mcc=mcc_score(confusion), n=int(labels.size),
                         confusion=confusion, auc=auc)


def retrieval_top1(V: Array, W: Array) -> float:
    """Fraction of rows of V whose most similar row of W is its own index."""
    V = np.asarray(V, dtype=np.float64)
    W = np.asarray(W, dtype=np.float64)
    if V.shape != W.shape:
        raise ShapeMismatch(f"retrieval_top1: {V.shape} vs {W.shape}")
    sims = V @ W.T
    return float(np.mean(np.argmax(sims, axis=1) == np.arange(V.shape[0])))
