"""Network prompting: classify an image embedding against reference banks.

A labeled bank of network embeddings is partitioned per class into r
disjoint equal-size subsets; each subset's plain average is one group-level
reference (averages are deliberately NOT re-normalized). A query image
embedding is scored by its dot product against every reference; the
prediction is the class with the highest per-class mean similarity.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ShapeMismatch, TooFewReferences
from .seeds import stream_rng

Array = np.ndarray


@dataclass
class ReferenceSet:
    """k classes x r references, each the mean of a disjoint subject subset."""

    k: int
    r: int
    refs: Array                     # (k, r, d)
    provenance: list[list[list[str]]]  # per class, per reference: subject ids

    def __post_init__(self):
        self.refs = np.asarray(self.refs, dtype=np.float64)
        if self.refs.shape[:2] != (self.k, self.r):
            raise ShapeMismatch(
                f"ReferenceSet: refs shape {self.refs.shape} != ({self.k}, {self.r}, d)")
        if len(self.provenance) != self.k or any(len(p) != self.r for p in self.provenance):
            raise ShapeMismatch("ReferenceSet: provenance shape mismatch")

    @property
    def dim(self) -> int:
        return self.refs.shape[2]

    def to_json(self) -> str:
        payload = {
            "k": self.k,
            "r": self.r,
            "dim": self.dim,
            "refs": self.refs.tolist(),
            "provenance": self.provenance,
        }
        return json.dumps(payload, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ReferenceSet":
        obj = json.loads(text)
        return cls(k=obj["k"], r=obj["r"], refs=np.asarray(obj["refs"]),
                   provenance=obj["provenance"])


@dataclass
class PromptResult:
    """Similarity table, per-class means, and the argmax prediction."""

    similarities: Array   # (k, r)
    class_means: Array    # (k,)
    predicted: int

    def table(self) -> str:
        lines = ["class  mean       similarities"]
        for l in range(self.similarities.shape[0]):
            sims = "  ".join(f"{s:+.4f}" for s in self.similarities[l])
            marker = " <- predicted" if l == self.predicted else ""
            lines.append(f"{l:5d}  {self.class_means[l]:+.6f}  {sims}{marker}")
        return "\n".join(lines)


def build_reference_set(embeddings_by_class: dict[int, Array], r: int, seed: int,
                        ids_by_class: dict[int, list[str]] | None = None,
                        ) -> ReferenceSet:
    """Partition each class bank into r disjoint subsets and average them.

    Per class: seeded shuffle, drop the n mod r trailing items, split into r
    contiguous subsets of size n // r, average each. Classes must be the
    contiguous range 0..k-1.
    """
    if r < 1:
        raise TooFewReferences(f"build_reference_set: r must be >= 1, got {r}")
    classes = sorted(embeddings_by_class)
    if classes != list(range(len(classes))):
        raise ShapeMismatch(
            f"build_reference_set: class keys must be 0..k-1, got {classes}")
    refs = []
    provenance: list[list[list[str]]] = []
    dim = None
    for label in classes:
        emb = np.asarray(embeddings_by_class[label], dtype=np.float64)
        if emb.ndim != 2:
            raise ShapeMismatch(f"build_reference_set: class {label} bank not 2-D")
        if dim is None:
            dim = emb.shape[1]
        elif emb.shape[1] != dim:
            raise ShapeMismatch("build_reference_set: embedding dims differ across classes")
        n = emb.shape[0]
        if n < r:
            raise TooFewReferences(
                f"build_reference_set: class {label} has {n} embeddings < r={r}")
        ids = (ids_by_class or {}).get(label) or [str(i) for i in range(n)]
        if len(ids) != n:
            raise ShapeMismatch(f"build_reference_set: class {label} id count mismatch")
        order = stream_rng(seed, "refsplit", label).permutation(n)
        keep = n - (n % r)
        size = keep // r
        class_refs = []
        class_prov = []
        for i in range(r):
            subset = order[i * size:(i + 1) * size]
            class_refs.append(emb[subset].mean(axis=0))
            class_prov.append([ids[j] for j in subset])
        refs.append(class_refs)
        provenance.append(class_prov)
    return ReferenceSet(k=len(classes), r=r, refs=np.asarray(refs),
                        provenance=provenance)


def prompt_classify(v: Array, refs: ReferenceSet) -> PromptResult:
    """Score a query embedding against every reference and take the argmax.

    Ties are broken toward the lowest class index (np.argmax convention).
    """
    v = np.asarray(v, dtype=np.float64).ravel()
    if v.size != refs.dim:
        raise ShapeMismatch(
            f"prompt_classify: query dim {v.size} != reference dim {refs.dim}")
    sims = refs.refs @ v                 # (k, r)
    means = sims.mean(axis=1)            # (k,)
    return PromptResult(similarities=sims, class_means=means,
                        predicted=int(np.argmax(means)))
