"""Objective terms: supervised cross-entropy, the consistency distance,
the weighted intervention loss, certainty weights, and the adversarial
domain loss.

Certainty weight modes:

* ``exp_neg_entropy`` (default): Q = e^{-H(p)} in (0, 1], monotone in
  prediction certainty, so uncertain anchors are softly down-weighted.
* ``neg_exp_entropy``: Q = -e^{H(p)} in [-K, -1]. Kept selectable for
  fidelity experiments; as a minimized-loss weight it rewards larger
  consistency distances for uncertain anchors, which is the opposite of
  a stabilizing re-weighting.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import LOG_EPS, Tensor
from .layers import MlpModel

CERTAINTY_MODES = ("exp_neg_entropy", "neg_exp_entropy")


@dataclass(frozen=True)
class LossTerms:
    """One step's loss decomposition; total = j + beta*l_fi + gamma*d_domain."""

    j_supervised: float
    l_fi: float
    d_domain: float
    total: float
    beta: float
    gamma: float

    @classmethod
    def compose(cls, j: float, l_fi: float, d_domain: float,
                beta: float, gamma: float) -> "LossTerms":
        return cls(j, l_fi, d_domain, j + beta * l_fi + gamma * d_domain,
                   beta, gamma)


def one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    out = np.zeros((labels.shape[0], num_classes), dtype=np.float64)
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of the true class under softmax(logits)."""
    m, k = logits.values.shape
    oh = ad.constant(one_hot(labels, k))
    logp = ad.log(ad.softmax_rows(logits))
    return ad.mul(ad.sum_all(ad.mul(oh, logp)), -1.0 / m)


def entropy(p: np.ndarray) -> float:
    """Shannon entropy in nats; log arguments clamped at LOG_EPS."""
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1:
        raise ValueError(f"entropy: need a 1-D probability vector, got shape {p.shape}")
    if np.any(p < 0.0):
        raise ValueError("entropy: probabilities must be nonnegative")
    if abs(float(p.sum()) - 1.0) > 1e-6:
        raise ValueError(f"entropy: probabilities sum to {p.sum()}, not 1")
    return float(-(p * np.log(np.maximum(p, LOG_EPS))).sum())


def certainty_weight(p: np.ndarray, mode: str = "exp_neg_entropy") -> float:
    h = entropy(p)
    if mode == "exp_neg_entropy":
        return float(np.exp(-h))
    if mode == "neg_exp_entropy":
        return float(-np.exp(h))
    raise ValueError(f"unknown certainty mode {mode!r}")


def certainty_weights(probs: np.ndarray, mode: str = "exp_neg_entropy") -> np.ndarray:
    """Row-wise certainty weights for an (m, K) matrix of probabilities."""
    probs = np.asarray(probs, dtype=np.float64)
    h = -(probs * np.log(np.maximum(probs, LOG_EPS))).sum(axis=1)
    if mode == "exp_neg_entropy":
        return np.exp(-h)
    if mode == "neg_exp_entropy":
        return -np.exp(h)
    raise ValueError(f"unknown certainty mode {mode!r}")


def _as_row(f) -> Tensor:
    t = f if isinstance(f, Tensor) else ad.constant(f)
    if t.values.ndim == 1:
        t = ad.reshape(t, (1, t.values.shape[0]))
    return t


def pair_distance(f_a, f_b, same_class: bool, t_d: float = 9.0, q: int = 2) -> Tensor:
    """Representation distance: q-norm for same-class pairs, hinged margin
    max(0, t_d - norm) for different-class pairs."""
    if t_d <= 0:
        raise ValueError(f"pair_distance: t_d must be positive, got {t_d}")
    a, b = _as_row(f_a), _as_row(f_b)
    if a.values.shape != b.values.shape:
        raise ad.ShapeError(
            f"pair_distance: lengths {a.values.shape} and {b.values.shape} differ")
    d = ad.norm_rows(ad.sub(a, b), q)
    if not same_class:
        d = ad.hinge(d, t_d)
    return ad.reshape(d, ())


@dataclass
class ConsistencyTerm:
    """One group of anchor-vs-counterfactual comparisons for the
    intervention loss.

    ``anchor_idx`` selects rows of the anchor-domain representation
    matrix, aligned with the rows of ``cf_reps``. ``same_class`` picks the
    norm branch; hinge terms (different-class comparisons) set it False.
    """

    anchor_domain: str  # "source" | "target"
    anchor_idx: np.ndarray
    cf_reps: Tensor
    same_class: bool = True


def l_fi(f_source: Tensor, f_target: Tensor, terms: list[ConsistencyTerm],
         q_source: np.ndarray, q_target: np.ndarray,
         t_d: float = 9.0, q: int = 2) -> Tensor:
    """Certainty-weighted consistency objective over counterfactual groups.

    Per domain, anchors' weighted distance sums are averaged over the
    anchors that contributed at least one term; the source and target
    averages are added. Anchors whose pair was skipped simply contribute
    nothing for that group.
    """
    anchors = {"source": f_source, "target": f_target}
    weights = {"source": np.asarray(q_source if q_source is not None else [], dtype=np.float64),
               "target": np.asarray(q_target if q_target is not None else [], dtype=np.float64)}
    for dom in ("source", "target"):
        if anchors[dom] is not None and weights[dom].shape[0] != anchors[dom].values.shape[0]:
            raise ValueError(
                f"l_fi: {dom} has {anchors[dom].values.shape[0]} anchors but "
                f"{weights[dom].shape[0]} certainty weights")

    sums: dict[str, Tensor | None] = {"source": None, "target": None}
    participants: dict[str, set[int]] = {"source": set(), "target": set()}
    for term in terms:
        dom = term.anchor_domain
        if dom not in anchors or anchors[dom] is None:
            raise ValueError(f"l_fi: unknown anchor domain {dom!r}")
        idx = np.asarray(term.anchor_idx, dtype=np.intp)
        if idx.shape[0] != term.cf_reps.values.shape[0]:
            raise ValueError(
                f"l_fi: {idx.shape[0]} anchors misaligned with "
                f"{term.cf_reps.values.shape[0]} counterfactual rows")
        if idx.size == 0:
            continue
        gathered = ad.take_rows(anchors[dom], idx)
        d = ad.norm_rows(ad.sub(gathered, term.cf_reps), q)
        if not term.same_class:
            d = ad.hinge(d, t_d)
        w = ad.constant(weights[dom][idx])
        contrib = ad.sum_all(ad.mul(w, d))
        sums[dom] = contrib if sums[dom] is None else ad.add(sums[dom], contrib)
        participants[dom].update(int(i) for i in idx)

    total = ad.constant(0.0)
    for dom in ("source", "target"):
        if sums[dom] is not None:
            total = ad.add(total, ad.mul(sums[dom], 1.0 / len(participants[dom])))
    return total


def domain_adv_loss(discriminator: MlpModel, f_source_cf: Tensor | None,
                    f_target_cf: Tensor | None,
                    counters: dict | None = None) -> Tensor:
    """Binary cross-entropy of the domain discriminator over counterfactual
    representations, source as the positive class.

    The caller is responsible for routing the representations through the
    gradient reversal before this loss, which is what turns the single
    minimization into adversarial training.
    """
    parts: list[Tensor] = []
    n = 0
    if f_source_cf is not None and f_source_cf.values.shape[0] > 0:
        p_s = discriminator.forward(f_source_cf)
        parts.append(ad.sum_all(ad.log(p_s)))
        n += f_source_cf.values.shape[0]
    else:
        if counters is not None:
            counters["domain_adv_empty_source"] = counters.get("domain_adv_empty_source", 0) + 1
    if f_target_cf is not None and f_target_cf.values.shape[0] > 0:
        p_t = discriminator.forward(f_target_cf)
        parts.append(ad.sum_all(ad.log(ad.affine(p_t, -1.0, 1.0))))
        n += f_target_cf.values.shape[0]
    else:
        if counters is not None:
            counters["domain_adv_empty_target"] = counters.get("domain_adv_empty_target", 0) + 1
    if not parts:
        return ad.constant(0.0)
    total = parts[0] if len(parts) == 1 else ad.add(parts[0], parts[1])
    return ad.mul(total, -1.0 / n)
