"""Counterfactual feature generation and within-class pair sampling.

Counterfactuals are convex mixtures of two parent features, gated
componentwise by the attention switch, and are only ever built from
parents sharing a class identity (true labels on the source side,
pseudo-labels on the target side).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .layers import MlpModel, attention_forward
from .losses import cross_entropy

# (anchor domain, partner domain) for the four counterfactual groups
GROUPS = {
    "ss": ("source", "source"),
    "st": ("source", "target"),
    "ts": ("target", "source"),
    "tt": ("target", "target"),
}


@dataclass(frozen=True)
class FeaturePair:
    """An anchor sample and a same-class partner, identified by batch row."""

    anchor_index: int
    partner_index: int
    anchor_domain: str
    partner_domain: str
    shared_class: int


@dataclass
class PairGroup:
    anchor_domain: str
    partner_domain: str
    anchor_idx: np.ndarray
    partner_idx: np.ndarray
    shared_class: np.ndarray

    def __len__(self) -> int:
        return int(self.anchor_idx.shape[0])


@dataclass
class PairBatch:
    """Pair assignments for all four domain combinations plus skip counts."""

    groups: dict[str, PairGroup]
    skipped: dict[str, int] = field(default_factory=dict)

    def pairs(self) -> list[FeaturePair]:
        out = []
        for group in self.groups.values():
            for a, p, c in zip(group.anchor_idx, group.partner_idx, group.shared_class):
                out.append(FeaturePair(int(a), int(p), group.anchor_domain,
                                       group.partner_domain, int(c)))
        return out


def _by_class(labels: np.ndarray) -> dict[int, np.ndarray]:
    labels = np.asarray(labels)
    return {int(c): np.flatnonzero(labels == c) for c in np.unique(labels)}


def _pick(candidates: np.ndarray, rng: np.random.Generator) -> int:
    return int(candidates[rng.integers(0, candidates.shape[0])])


def sample_pairs(source_labels: np.ndarray, target_pseudo_labels: np.ndarray,
                 rng: np.random.Generator) -> PairBatch:
    """Draw one same-class partner per anchor for each domain combination.

    Partners are uniform over the eligible candidates. A within-domain
    anchor whose class has no other member degenerates to a self-pair;
    a cross-domain anchor with no same-class candidate is skipped for
    that combination and counted in ``skipped``.
    """
    source_labels = np.asarray(source_labels)
    target_pseudo_labels = np.asarray(target_pseudo_labels)
    if source_labels.size == 0 or target_pseudo_labels.size == 0:
        raise ValueError("sample_pairs: both batches must be nonempty")
    src_by = _by_class(source_labels)
    tgt_by = _by_class(target_pseudo_labels)
    labels = {"source": source_labels, "target": target_pseudo_labels}
    index = {"source": src_by, "target": tgt_by}

    groups: dict[str, PairGroup] = {}
    skipped: dict[str, int] = {key: 0 for key in GROUPS}
    for key, (a_dom, p_dom) in GROUPS.items():
        anchors, partners, classes = [], [], []
        within = a_dom == p_dom
        for i, c in enumerate(labels[a_dom]):
            c = int(c)
            cands = index[p_dom].get(c)
            if within:
                cands = cands[cands != i]
                if cands.size == 0:
                    j = i  # self-pair fallback keeps the loss defined
                else:
                    j = _pick(cands, rng)
            else:
                if cands is None or cands.size == 0:
                    skipped[key] += 1
                    continue
                j = _pick(cands, rng)
            anchors.append(i)
            partners.append(j)
            classes.append(c)
        groups[key] = PairGroup(a_dom, p_dom,
                                np.asarray(anchors, dtype=np.intp),
                                np.asarray(partners, dtype=np.intp),
                                np.asarray(classes, dtype=np.int64))
    return PairBatch(groups, skipped)


def fi(x_a: Tensor, x_b: Tensor, attention: MlpModel | None,
       switch: Tensor | None = None) -> Tensor:
    """Counterfactual mixture a*x_a + (1-a)*x_b with the attention switch a.

    ``switch`` overrides the attention computation (stub switches in tests,
    gradient-routed switches in the trainer). Because a is in (0, 1), the
    output lies in the componentwise envelope of its parents, and is
    differentiable w.r.t. both parents and the attention parameters.
    """
    if x_a.values.shape != x_b.values.shape:
        raise ad.ShapeError(
            f"fi: parent shapes {x_a.values.shape} and {x_b.values.shape} differ")
    a = switch if switch is not None else attention_forward(x_a, x_b, attention)
    if a.values.shape != x_a.values.shape:
        raise ad.ShapeError(
            f"fi: switch shape {a.values.shape} does not match parents "
            f"{x_a.values.shape}")
    return ad.add(ad.mul(a, x_a), ad.mul(ad.affine(a, -1.0, 1.0), x_b))


def within_envelope(x_a: np.ndarray, x_b: np.ndarray, x_tilde: np.ndarray,
                    tol: float = 1e-12) -> bool:
    """Componentwise min(x_a, x_b) - tol <= x_tilde <= max(x_a, x_b) + tol."""
    lo = np.minimum(x_a, x_b) - tol
    hi = np.maximum(x_a, x_b) + tol
    return bool(np.all(x_tilde >= lo) and np.all(x_tilde <= hi))


def source_counterfactual_supervision(x_a: Tensor, x_b: Tensor,
                                      labels_a: np.ndarray, labels_b: np.ndarray,
                                      attention: MlpModel,
                                      predict_logits,
                                      switch: Tensor | None = None) -> Tensor:
    """Cross-entropy of the classifier on source-source counterfactuals
    against the label both parents share.

    ``predict_logits`` maps intervention-site features to class logits
    (the downstream extractor tail, mapper, and classifier).
    """
    labels_a = np.asarray(labels_a)
    labels_b = np.asarray(labels_b)
    if labels_a.shape != labels_b.shape or np.any(labels_a != labels_b):
        raise ValueError(
            "source_counterfactual_supervision: parents must share their label")
    x_tilde = fi(x_a, x_b, attention, switch=switch)
    return cross_entropy(predict_logits(x_tilde), labels_a)
