"""The optimization loop: schedules, pseudo-labeling, counterfactual
construction, both adversarial couplings, and per-epoch metrics.

Gradient routing in one joint step (ida mode):

* The attention switch is computed from detached site features, so its
  only upstream parameters are the attention weights. On the consistency
  path the switch passes a gradient reversal of strength gamma: attention
  ascends the intervention loss while extractor and mapper descend it.
* The supervised counterfactual term uses the plain switch, so attention
  also descends that cross-entropy.
* The adversarial domain loss sees counterfactuals built from a fully
  detached switch (no gradient reaches attention from it) and its
  representations pass a gradient reversal of strength gamma before the
  discriminator: the discriminator descends, extractor and mapper ascend.

Total objective per step: J + beta * L_FI + gamma * D_adv with
beta = beta_ratio * gamma.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .backend import kernels as K
from .intervention import fi, sample_pairs
from .layers import ModelBundle, attention_forward, validate_bundle
from .losses import (CERTAINTY_MODES, ConsistencyTerm, LossTerms, certainty_weights,
                     cross_entropy, domain_adv_loss, l_fi)

MODES = ("source_only", "dann_style", "ida")

# Reference sizes for a full-scale run on top of a deep backbone
# (4096-d intervention site, 256-unit adaptation layer, 256-unit
# attention hidden layer). The desk-scale defaults below keep a full
# experiment under a minute.
FULL_SCALE = {"site_dim": 4096, "mapper_out": 256, "attention_hidden": 256}


@dataclass
class TrainConfig:
    """All knobs of a run; every field lands in output manifests."""

    epochs: int = 30
    batch_size: int = 64
    learning_rate: float = 0.005
    optimizer: str = "sgd_momentum"
    momentum: float = 0.9
    t_d: float = 9.0
    q: int = 2
    k_schedule: float = -10.0
    beta_ratio: float = 0.1
    seed: int = 0
    input_dim: int = 16
    num_classes: int = 2
    extractor_hidden: tuple[int, ...] = (64, 64)
    mapper_out: int = 16
    attention_hidden: int = 32
    discriminator_hidden: tuple[int, ...] = (8,)
    intervention_layer: int = -1  # -1: the extractor output
    certainty_mode: str = "exp_neg_entropy"
    interclass_hinge: bool = True
    source_cf_supervision: bool = True
    attention_grl: bool = True
    mode: str = "ida"

    def __post_init__(self):
        self.extractor_hidden = tuple(int(h) for h in self.extractor_hidden)
        self.discriminator_hidden = tuple(int(h) for h in self.discriminator_hidden)
        self.validate()

    def validate(self) -> None:
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.optimizer != "sgd_momentum":
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if not (0.0 <= self.momentum < 1.0):
            raise ValueError("momentum must be in [0, 1)")
        if self.t_d <= 0:
            raise ValueError("t_d must be positive")
        if self.q not in (1, 2):
            raise ValueError("q must be 1 or 2")
        if self.beta_ratio < 0:
            raise ValueError("beta_ratio must be >= 0")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.certainty_mode not in CERTAINTY_MODES:
            raise ValueError(f"unknown certainty mode {self.certainty_mode!r}")
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.intervention_layer != -1 and self.intervention_layer < 1:
            raise ValueError("intervention_layer must be -1 or >= 1")


@dataclass
class MetricsRecord:
    """Per-epoch snapshot; loss fields are means over the epoch's steps."""

    epoch: int
    j_supervised: float
    l_fi: float
    d_domain: float
    gamma: float
    beta: float
    source_accuracy: float
    target_accuracy: float
    pseudo_label_accuracy: float
    mean_certainty: float

    FIELDS = ("epoch", "j_supervised", "l_fi", "d_domain", "gamma", "beta",
              "source_accuracy", "target_accuracy", "pseudo_label_accuracy",
              "mean_certainty")


def gamma_schedule(m: float, k: float = -10.0) -> float:
    """Ramp 2 / (1 + exp(k*m)) - 1 over training progress m in [0, 1]."""
    if not (0.0 <= m <= 1.0):
        raise ValueError(f"training progress must lie in [0, 1], got {m}")
    return 2.0 / (1.0 + math.exp(k * m)) - 1.0


def baseline_modes(config: TrainConfig) -> dict[str, TrainConfig]:
    """The three comparison configurations sharing all other settings."""
    return {mode: replace(config, mode=mode) for mode in MODES}


# ---------------------------------------------------------------------
# evaluation-mode passes
# ---------------------------------------------------------------------

def _require_eval_mode(what: str) -> None:
    if ad.active_tape() is not None:
        raise ad.AutodiffError(f"{what} runs in evaluation mode; no tape may be active")


def predict_probs(bundle: ModelBundle, x: np.ndarray) -> np.ndarray:
    _require_eval_mode("predict_probs")
    return K.softmax_rows(bundle.logits(x))


def pseudo_label(bundle: ModelBundle, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Argmax predictions plus their probability vectors.

    Ties break toward the lowest class index (argmax picks the first max).
    """
    probs = predict_probs(bundle, x)
    return probs.argmax(axis=1), probs


def accuracy(bundle: ModelBundle, x: np.ndarray, y: np.ndarray) -> float:
    _require_eval_mode("accuracy")
    return float((bundle.logits(x).argmax(axis=1) == np.asarray(y)).mean())


# ---------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------

class SgdMomentum:
    def __init__(self, params: list[tuple[str, Tensor]], lr: float, momentum: float):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.velocity = {name: np.zeros_like(t.values) for name, t in params}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        for name, tensor in self.params:
            v = self.velocity[name]
            v *= self.momentum
            v += grads[name]
            tensor.values -= self.lr * v


# ---------------------------------------------------------------------
# one training step
# ---------------------------------------------------------------------

def _interclass_hinge_terms(cf_pool, anchor_labels: dict[str, np.ndarray],
                            rng: np.random.Generator) -> list[ConsistencyTerm]:
    """One sampled different-class counterfactual per anchor.

    ``cf_pool`` holds (rep tensor, shared classes) for each generated
    group; anchors draw uniformly from all pool rows of another class.
    """
    if not cf_pool:
        return []
    pool_classes = np.concatenate([classes for _, classes in cf_pool])
    offsets = np.cumsum([0] + [len(classes) for _, classes in cf_pool])
    not_class = {int(c): np.flatnonzero(pool_classes != c)
                 for c in np.unique(np.concatenate(list(anchor_labels.values())))}

    terms = []
    for dom in ("source", "target"):
        labels = anchor_labels[dom]
        chosen_anchor: list[int] = []
        chosen_global: list[int] = []
        for i, c in enumerate(labels):
            cands = not_class.get(int(c))
            if cands is None or cands.size == 0:
                continue
            chosen_anchor.append(i)
            chosen_global.append(int(cands[rng.integers(0, cands.size)]))
        if not chosen_anchor:
            continue
        chosen_anchor = np.asarray(chosen_anchor, dtype=np.intp)
        chosen_global = np.asarray(chosen_global, dtype=np.intp)
        entry = np.searchsorted(offsets, chosen_global, side="right") - 1
        for e in np.unique(entry):
            mask = entry == e
            rows = chosen_global[mask] - offsets[e]
            terms.append(ConsistencyTerm(dom, chosen_anchor[mask],
                                         ad.take_rows(cf_pool[e][0], rows),
                                         same_class=False))
    return terms


def train_step(bundle: ModelBundle, opt: SgdMomentum, src_x: np.ndarray,
               src_y: np.ndarray, tgt_x: np.ndarray, m: float,
               config: TrainConfig, rng: np.random.Generator,
               counters: dict) -> tuple[LossTerms, bool]:
    """One forward/backward/update. Returns the loss terms and whether the
    parameter update was applied (False when a loss came out non-finite)."""
    gamma = gamma_schedule(m, config.k_schedule)
    beta = config.beta_ratio * gamma
    bundle.grl_lambda_domain = gamma
    bundle.grl_lambda_attention = gamma
    mode = config.mode

    if mode == "ida":
        pseudo, tgt_probs = pseudo_label(bundle, tgt_x)
        src_probs = predict_probs(bundle, src_x)
        q_src = certainty_weights(src_probs, config.certainty_mode)
        q_tgt = certainty_weights(tgt_probs, config.certainty_mode)
        pairs = sample_pairs(src_y, pseudo, rng)
        anchor_labels = {"source": np.asarray(src_y), "target": pseudo}

    k = bundle.intervention_layer
    with ad.Tape() as tape:
        site_s = bundle.extractor.forward(ad.constant(src_x), stop=k)
        site_t = bundle.extractor.forward(ad.constant(tgt_x), stop=k)
        f_s = bundle.mapper.forward(bundle.extractor.forward(site_s, start=k))
        f_t = bundle.mapper.forward(bundle.extractor.forward(site_t, start=k))
        j = cross_entropy(bundle.classifier.forward(f_s), src_y)

        lfi_term = ad.constant(0.0)
        dd_term = ad.constant(0.0)
        if mode == "ida":
            site = {"source": site_s, "target": site_t}

            def represent(x_site: Tensor) -> Tensor:
                return bundle.mapper.forward(bundle.extractor.forward(x_site, start=k))

            terms: list[ConsistencyTerm] = []
            cf_pool = []
            adv_reps = {}
            for key, group in pairs.groups.items():
                if len(group) == 0:
                    continue
                xa = ad.take_rows(site[group.anchor_domain], group.anchor_idx)
                xb = ad.take_rows(site[group.partner_domain], group.partner_idx)
                # switch from detached parents: its graph contains only
                # the attention parameters, so reversing it targets them
                a = attention_forward(ad.constant(xa.values), ad.constant(xb.values),
                                      bundle.attention)
                a_fi = ad.grad_reverse(a, gamma) if config.attention_grl else a
                rep_fi = represent(fi(xa, xb, None, switch=a_fi))
                terms.append(ConsistencyTerm(group.anchor_domain, group.anchor_idx,
                                             rep_fi, same_class=True))
                cf_pool.append((rep_fi, group.shared_class))
                if key in ("ss", "tt"):
                    rep_adv = represent(fi(xa, xb, None, switch=ad.constant(a.values)))
                    adv_reps[key] = rep_adv
                if key == "ss" and config.source_cf_supervision:
                    logits_cf = bundle.classifier.forward(
                        represent(fi(xa, xb, None, switch=a)))
                    j = ad.add(j, cross_entropy(logits_cf, group.shared_class))
            if config.interclass_hinge:
                terms.extend(_interclass_hinge_terms(cf_pool, anchor_labels, rng))
            lfi_term = l_fi(f_s, f_t, terms, q_src, q_tgt, config.t_d, config.q)
            dd_term = domain_adv_loss(
                bundle.discriminator,
                ad.grad_reverse(adv_reps["ss"], gamma) if "ss" in adv_reps else None,
                ad.grad_reverse(adv_reps["tt"], gamma) if "tt" in adv_reps else None,
                counters)
        elif mode == "dann_style":
            dd_term = domain_adv_loss(bundle.discriminator,
                                      ad.grad_reverse(f_s, gamma),
                                      ad.grad_reverse(f_t, gamma), counters)

        total = ad.add(j, ad.add(ad.mul(lfi_term, beta), ad.mul(dd_term, gamma)))
        loss_terms = LossTerms.compose(j.item(), lfi_term.item(), dd_term.item(),
                                       beta, gamma)
        if not all(math.isfinite(v) for v in
                   (loss_terms.j_supervised, loss_terms.l_fi, loss_terms.d_domain)):
            counters["nan_steps"] = counters.get("nan_steps", 0) + 1
            return loss_terms, False

        tape.backward(total)
        grads = {name: tape.grad(t) for name, t in bundle.parameters()}
    opt.step(grads)
    return loss_terms, True


# ---------------------------------------------------------------------
# the full loop
# ---------------------------------------------------------------------

def train(bundle: ModelBundle, source, target,
          config: TrainConfig) -> tuple[ModelBundle, list[MetricsRecord]]:
    """Run the full schedule over a labeled source and unlabeled target.

    Target labels, when the dataset carries them, feed evaluation metrics
    only. Fully deterministic in config.seed.
    """
    config.validate()
    validate_bundle(bundle)
    d_in = bundle.extractor.spec.in_dim
    for name, ds in (("source", source), ("target", target)):
        if ds.features.shape[1] != d_in:
            raise ValueError(
                f"dataset dimensionality mismatch: {name} features have "
                f"{ds.features.shape[1]} dims, extractor expects {d_in}")
    n_classes = bundle.classifier.spec.out_dim
    if np.any(np.asarray(source.labels) >= n_classes) or np.any(np.asarray(source.labels) < 0):
        raise ValueError(f"source labels outside [0, {n_classes})")

    src_x = np.ascontiguousarray(source.features, dtype=np.float64)
    src_y = np.asarray(source.labels)
    tgt_x = np.ascontiguousarray(target.features, dtype=np.float64)
    ns, nt = src_x.shape[0], tgt_x.shape[0]
    bs = min(config.batch_size, ns, nt)
    if bs < 2:
        raise ValueError("need at least 2 samples per domain")
    steps_per_epoch = max(1, min(ns, nt) // bs)
    total_steps = config.epochs * steps_per_epoch

    opt = SgdMomentum(bundle.parameters(), config.learning_rate, config.momentum)
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 1]))
    counters: dict[str, int] = {}
    metrics: list[MetricsRecord] = []
    completed = 0
    consecutive_nan = 0

    for epoch in range(config.epochs):
        perm_s = rng.permutation(ns)
        perm_t = rng.permutation(nt)
        sums = {"j": 0.0, "lfi": 0.0, "dd": 0.0}
        stepped_count = 0
        last = None
        for b in range(steps_per_epoch):
            sl = slice(b * bs, (b + 1) * bs)
            m = completed / total_steps
            last, stepped = train_step(bundle, opt, src_x[perm_s[sl]],
                                       src_y[perm_s[sl]], tgt_x[perm_t[sl]],
                                       m, config, rng, counters)
            completed += 1
            if stepped:
                consecutive_nan = 0
                stepped_count += 1
                sums["j"] += last.j_supervised
                sums["lfi"] += last.l_fi
                sums["dd"] += last.d_domain
            else:
                consecutive_nan += 1
                if consecutive_nan >= 3:
                    raise RuntimeError(
                        "three consecutive steps produced non-finite losses; "
                        "aborting the run")
        denom = max(1, stepped_count)
        pseudo_acc = float("nan")
        mean_q = float("nan")
        if config.mode == "ida":
            pseudo, tgt_probs = pseudo_label(bundle, tgt_x)
            if target.labels is not None:
                pseudo_acc = float((pseudo == np.asarray(target.labels)).mean())
            src_probs = predict_probs(bundle, src_x)
            q_all = np.concatenate([certainty_weights(src_probs, config.certainty_mode),
                                    certainty_weights(tgt_probs, config.certainty_mode)])
            mean_q = float(q_all.mean())
        rec = MetricsRecord(
            epoch=epoch + 1,
            j_supervised=sums["j"] / denom if stepped_count else float("nan"),
            l_fi=sums["lfi"] / denom if stepped_count else float("nan"),
            d_domain=sums["dd"] / denom if stepped_count else float("nan"),
            gamma=last.gamma, beta=last.beta,
            source_accuracy=accuracy(bundle, src_x, src_y),
            target_accuracy=(accuracy(bundle, tgt_x, target.labels)
                             if target.labels is not None else float("nan")),
            pseudo_label_accuracy=pseudo_acc,
            mean_certainty=mean_q)
        metrics.append(rec)
    return bundle, metrics
