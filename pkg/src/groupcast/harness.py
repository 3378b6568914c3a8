"""Machine-checkable permutation properties.

A series permutation p is stored as an index vector: applying it to a
series-major array means taking rows X[p] (row i of the result is original
row p[i]); class labels travel with their series, so the permuted labels
are labels[p].

A permutation is *hierarchical* for a labeling when it only shuffles
series within classes and/or relocates whole classes:

  (a) cell transport - the partition of positions into class cells is
      preserved (classes may trade places when their sizes match); this
      family is closed under composition and inverse, and it is what the
      random generator draws from;
  (b) block reflow - when both the original and the permuted label
      sequences lay every class out as one contiguous block, any
      reordering of whole blocks counts, sizes may differ.

Mixing members of different classes (e.g. swapping one series of class A
with one of class B while leaving the rest in place) is never hierarchical.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import DimensionError
from .seeding import make_rng


def _as_perm(p, n=None):
    p = np.asarray(p, dtype=np.intp)
    if n is not None and p.shape != (n,):
        raise DimensionError(f"permutation length {p.shape} does not match {n} series")
    if sorted(p.tolist()) != list(range(len(p))):
        raise DimensionError("not a bijection on series indices")
    return p


def apply_permutation(p, arr, axis=0):
    return np.take(np.asarray(arr), _as_perm(p), axis=axis)


def _cells(labels):
    cells = {}
    for i, lab in enumerate(labels):
        cells.setdefault(lab, []).append(i)
    return {lab: frozenset(ix) for lab, ix in cells.items()}


def _contiguous_blocks(labels):
    """Label of each maximal run, or None if some class splits into >1 run."""
    runs = []
    for lab in labels:
        if not runs or runs[-1] != lab:
            runs.append(lab)
    return runs if len(runs) == len(set(runs)) else None


def is_hierarchical_permutation(p, labels) -> bool:
    labels = list(labels)
    p = _as_perm(p, len(labels))
    permuted = [labels[i] for i in p]
    cells_before = set(_cells(labels).values())
    cells_after = set(_cells(permuted).values())
    if cells_before == cells_after:
        return True  # within-class shuffles and equal-size class transports
    runs_before = _contiguous_blocks(labels)
    runs_after = _contiguous_blocks(permuted)
    if runs_before is not None and runs_after is not None:
        return set(runs_before) == set(runs_after)  # whole-block reordering
    return False


def random_hierarchical_permutation(labels, seed) -> np.ndarray:
    """Uniform within-class shuffles composed with a uniform shuffle of
    equal-size-compatible class blocks."""
    labels = list(labels)
    rng = seed if isinstance(seed, np.random.Generator) else make_rng(seed)
    cells = {}
    for i, lab in enumerate(labels):
        cells.setdefault(lab, []).append(i)
    class_list = list(cells)
    by_size = {}
    for lab in class_list:
        by_size.setdefault(len(cells[lab]), []).append(lab)
    target = {}
    for size, labs in sorted(by_size.items(), key=lambda kv: kv[0]):
        shuffled = list(labs)
        rng.shuffle(shuffled)
        for a, b in zip(labs, shuffled):
            target[a] = b  # class a's members relocate onto class b's cell
    p = np.empty(len(labels), dtype=np.intp)
    for lab in class_list:
        members = np.array(cells[lab], dtype=np.intp)
        rng.shuffle(members)
        dest = sorted(cells[target[lab]])
        for pos, orig in zip(dest, members):
            p[pos] = orig
    return p


@dataclass
class EquivarianceVerdict:
    deviation: float
    tolerance: float
    passed: bool
    permutation: list
    hierarchical: bool
    worst_index: tuple | None = None
    components: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "deviation": self.deviation,
            "tolerance": self.tolerance,
            "passed": bool(self.passed),
            "permutation": [int(i) for i in self.permutation],
            "hierarchical": bool(self.hierarchical),
            "worst_index": list(self.worst_index) if self.worst_index else None,
            "components": self.components,
        }


def check_equivariance(model, x, labels, p, tol=1e-9, check_heads=True) -> EquivarianceVerdict:
    """Compare the model on permuted input against the transported output.

    Features must satisfy Z(pX, p-labels) = Z(X, labels)[p]; the mean head
    must transport as mu -> P mu, the covariance as Sigma -> P Sigma P^T,
    per (t, d) slice.
    """
    x = np.asarray(x)
    p = _as_perm(p, x.shape[0])
    labels = tuple(labels)
    perm_labels = tuple(labels[i] for i in p)
    with T.no_grad():
        z_base = model.features(x, labels).data
        z_perm = model.features(x[p], perm_labels).data
    diff = np.abs(z_perm - z_base[p])
    components = {"features": float(diff.max())}
    worst = np.unravel_index(int(diff.argmax()), diff.shape)
    if check_heads:
        base = model.predict(x, labels)
        perm = model.predict(x[p], perm_labels)
        components["mean"] = float(np.abs(perm.mean - base.mean[p]).max())
        components["cov"] = float(np.abs(perm.cov - base.cov[p][:, p]).max())
    deviation = max(components.values())
    return EquivarianceVerdict(
        deviation=deviation,
        tolerance=tol,
        passed=bool(deviation <= tol),
        permutation=p.tolist(),
        hierarchical=is_hierarchical_permutation(p, labels),
        worst_index=tuple(int(i) for i in worst),
        components=components,
    )


def run_equivariance_suite(model, x, labels, n_permutations, seed, tol=1e-9,
                           hierarchical_only=True, check_heads=False):
    """Verdicts for n random permutations (hierarchical or arbitrary)."""
    rng = make_rng(seed)
    verdicts = []
    n = len(tuple(labels))
    for _ in range(n_permutations):
        if hierarchical_only:
            p = random_hierarchical_permutation(labels, rng)
        else:
            p = rng.permutation(n)
        verdicts.append(check_equivariance(model, x, labels, p, tol=tol,
                                           check_heads=check_heads))
    return verdicts


def write_verdicts_ndjson(verdicts, path, header=None):
    with open(path, "w", encoding="utf-8") as fh:
        head = {"record": "header", "n": len(verdicts),
                "passed": all(v.passed for v in verdicts)}
        if header:
            head.update(header)
        fh.write(json.dumps(head) + "\n")
        for v in verdicts:
            fh.write(json.dumps({"record": "verdict", **v.to_dict()}) + "\n")
