"""Analysis instruments: proxy A-distance, ideal-joint-hypothesis probe,
per-domain accuracies, and embedding export.

Probes are small two-layer perceptrons trained full-batch with the default
optimizer settings on cloned feature matrices; they never touch the main
model's parameters, and their train/test splits never leak into the
reported error.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .layers import MlpModel, MlpSpec, ModelBundle
from .losses import cross_entropy
from .trainer import SgdMomentum, accuracy

PROBE_EPOCHS = 200
PROBE_LR = 0.05
PROBE_MOMENTUM = 0.9
DOMAIN_PROBE_HIDDEN = 16
JOINT_PROBE_HIDDEN = 32


def _standardize(train_x: np.ndarray, *rest: np.ndarray):
    mean = train_x.mean(axis=0)
    std = np.maximum(train_x.std(axis=0), 1e-12)
    return tuple((x - mean) / std for x in (train_x, *rest))


def _fit_binary_probe(x: np.ndarray, y: np.ndarray, hidden: int,
                      rng: np.random.Generator) -> MlpModel:
    spec = MlpSpec((x.shape[1], hidden, 1), output_activation="sigmoid")
    probe = MlpModel.init(spec, rng)
    opt = SgdMomentum(probe.parameters("P"), PROBE_LR, PROBE_MOMENTUM)
    xv = ad.constant(x)
    yv = np.asarray(y, dtype=np.float64).reshape(-1, 1)
    y1 = ad.constant(yv)
    y0 = ad.constant(1.0 - yv)
    n = x.shape[0]
    for _ in range(PROBE_EPOCHS):
        with ad.Tape() as tape:
            p = probe.forward(xv)
            ll = ad.add(ad.mul(y1, ad.log(p)),
                        ad.mul(y0, ad.log(ad.affine(p, -1.0, 1.0))))
            loss = ad.mul(ad.sum_all(ll), -1.0 / n)
            tape.backward(loss)
            grads = {name: tape.grad(t) for name, t in probe.parameters("P")}
        opt.step(grads)
    return probe


def _fit_multiclass_probe(x: np.ndarray, y: np.ndarray, hidden: int,
                          num_classes: int, rng: np.random.Generator) -> MlpModel:
    spec = MlpSpec((x.shape[1], hidden, num_classes))
    probe = MlpModel.init(spec, rng)
    opt = SgdMomentum(probe.parameters("P"), PROBE_LR, PROBE_MOMENTUM)
    xv = ad.constant(x)
    for _ in range(PROBE_EPOCHS):
        with ad.Tape() as tape:
            loss = cross_entropy(probe.forward(xv), y)
            tape.backward(loss)
            grads = {name: tape.grad(t) for name, t in probe.parameters("P")}
        opt.step(grads)
    return probe


def proxy_a_distance(f_source: np.ndarray, f_target: np.ndarray, seed: int = 0,
                     hidden: int = DOMAIN_PROBE_HIDDEN, n_splits: int = 1) -> float:
    """Domain discrepancy 2*(1 - 2*eps) from a held-out domain classifier.

    Each domain is split 50/50 into probe-train and probe-test; eps is the
    test error of a two-layer perceptron trained to tell the domains
    apart. Returns the raw (unclipped) value; n_splits > 1 averages over
    reseeded splits.
    """
    f_source = np.asarray(f_source, dtype=np.float64)
    f_target = np.asarray(f_target, dtype=np.float64)
    if f_source.shape[0] < 20 or f_target.shape[0] < 20:
        raise ValueError("proxy_a_distance needs at least 20 samples per domain")
    values = []
    for split in range(n_splits):
        rng = np.random.default_rng(np.random.SeedSequence([seed, 21, split]))
        parts = {}
        for tag, f in (("s", f_source), ("t", f_target)):
            perm = rng.permutation(f.shape[0])
            half = f.shape[0] // 2
            parts[tag] = (f[perm[:half]], f[perm[half:]])
        x_train = np.vstack([parts["s"][0], parts["t"][0]])
        y_train = np.concatenate([np.ones(parts["s"][0].shape[0]),
                                  np.zeros(parts["t"][0].shape[0])])
        x_test = np.vstack([parts["s"][1], parts["t"][1]])
        y_test = np.concatenate([np.ones(parts["s"][1].shape[0]),
                                 np.zeros(parts["t"][1].shape[0])])
        x_train, x_test = _standardize(x_train, x_test)
        probe = _fit_binary_probe(x_train, y_train, hidden, rng)
        pred = (probe.forward(ad.constant(x_test)).values[:, 0] > 0.5).astype(float)
        eps = float((pred != y_test).mean())
        values.append(2.0 * (1.0 - 2.0 * eps))
    return float(np.mean(values))


def joint_error_probe(f_source: np.ndarray, y_source: np.ndarray,
                      f_target: np.ndarray, y_target: np.ndarray,
                      seed: int = 0, hidden: int = JOINT_PROBE_HIDDEN) -> float:
    """Held-out accuracy of a two-layer perceptron trained on both domains
    with true labels; higher accuracy means a smaller ideal-joint-error.

    Target labels are evaluation-only data, so they are required here.
    """
    if y_target is None:
        raise ValueError("joint_error_probe needs true target labels "
                         "(evaluation-only probe)")
    x = np.vstack([np.asarray(f_source, dtype=np.float64),
                   np.asarray(f_target, dtype=np.float64)])
    y = np.concatenate([np.asarray(y_source), np.asarray(y_target)])
    num_classes = int(y.max()) + 1
    rng = np.random.default_rng(np.random.SeedSequence([seed, 22]))
    perm = rng.permutation(x.shape[0])
    cut = int(round(0.8 * x.shape[0]))
    train, test = perm[:cut], perm[cut:]
    x_train, x_test = _standardize(x[train], x[test])
    probe = _fit_multiclass_probe(x_train, y[train], hidden, num_classes, rng)
    pred = probe.forward(ad.constant(x_test)).values.argmax(axis=1)
    return float((pred == y[test]).mean())


@dataclass
class DiagnosticsReport:
    """Evaluation summary; d_a is clipped to [0, 2], d_a_raw keeps the sign."""

    d_a: float
    d_a_raw: float
    joint_probe_accuracy: float
    accuracies: dict[str, float]
    config_hash: str = ""
    seed: int = 0

    def to_dict(self) -> dict:
        return {
            "d_a": self.d_a,
            "d_a_raw": self.d_a_raw,
            "joint_probe_accuracy": self.joint_probe_accuracy,
            "accuracies": dict(sorted(self.accuracies.items())),
            "config_hash": self.config_hash,
            "seed": self.seed,
        }


def evaluate(bundle: ModelBundle, experiment, seed: int = 0,
             config_hash: str = "", embeddings_path=None) -> DiagnosticsReport:
    """Accuracies for every domain (unseen included), discrepancy and
    joint-error probes on the adaptation-layer representations."""
    src, tgt = experiment.source, experiment.target
    if src.dim != bundle.extractor.spec.in_dim:
        raise ValueError(
            f"dataset dimensionality mismatch: features have {src.dim} dims, "
            f"extractor expects {bundle.extractor.spec.in_dim}")
    accs = {"source": accuracy(bundle, src.features, src.labels),
            "target": accuracy(bundle, tgt.features, tgt.labels)}
    if len(experiment.target_parts) > 1:
        for part in experiment.target_parts:
            accs[f"target:{part.domains[0]}"] = accuracy(
                bundle, part.features, part.labels)
    for ds in experiment.unseen:
        accs[f"unseen:{ds.domains[0]}"] = accuracy(bundle, ds.features, ds.labels)

    f_s = bundle.features(src.features)
    f_t = bundle.features(tgt.features)
    d_raw = proxy_a_distance(f_s, f_t, seed=seed)
    joint = joint_error_probe(f_s, src.labels, f_t, tgt.labels, seed=seed)
    if embeddings_path is not None:
        export_embeddings(bundle, [src, tgt, *experiment.unseen], embeddings_path)
    return DiagnosticsReport(
        d_a=float(np.clip(d_raw, 0.0, 2.0)), d_a_raw=float(d_raw),
        joint_probe_accuracy=joint, accuracies=accs,
        config_hash=config_hash, seed=seed)


def export_embeddings(bundle: ModelBundle, datasets, path) -> None:
    """Adaptation-layer representation, label, domain per row, for
    external visualization tooling."""
    k = bundle.mapper.spec.out_dim
    lines = [",".join([f"e{i}" for i in range(k)] + ["label", "domain"])]
    for ds in datasets:
        reps = bundle.features(ds.features)
        for row, label, dom in zip(reps, ds.labels, ds.domains):
            cells = ["%.17g" % v for v in row] + [str(int(label)), str(dom)]
            lines.append(",".join(cells))
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines) + "\n")


def read_embeddings(path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    with open(path, "r", encoding="ascii") as fh:
        lines = fh.read().splitlines()
    header = lines[0].split(",")
    k = len(header) - 2
    emb, labels, doms = [], [], []
    for line in lines[1:]:
        cells = line.split(",")
        emb.append([float(c) for c in cells[:k]])
        labels.append(int(cells[k]))
        doms.append(cells[k + 1])
    emb_arr = np.asarray(emb, dtype=np.float64) if emb else np.zeros((0, k))
    return emb_arr, np.asarray(labels), np.asarray(doms, dtype=object)
