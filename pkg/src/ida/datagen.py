"""Synthetic spurious-correlation domains.

Each sample is a class-informative block U (Gaussian around a per-class
mean, valid in every domain) concatenated with a domain-specific block V
(a "color": one of a few far-apart prototypes plus small jitter), then
passed through one fixed orthonormal rotation shared by all domains of an
experiment, so U and V are entangled in the observed features.

The trap: with ``label_correlated`` assignment each class draws its
designated prototype with probability P (otherwise uniformly among the
rest), so V looks discriminative on that domain; a ``uniform_random``
domain breaks the correlation and V becomes noise.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace

import numpy as np

V_ASSIGNMENTS = ("label_correlated", "uniform_random")


@dataclass(frozen=True)
class DomainSpec:
    name: str
    num_classes: int
    class_means: tuple  # (K, u_dim) nested tuples
    u_noise_sigma: float
    v_palette: tuple    # (n_prototypes, v_dim) nested tuples
    v_assignment: str
    correlation_p: float
    n_samples: int
    seed: int

    def __post_init__(self):
        object.__setattr__(self, "class_means", _freeze(self.class_means))
        object.__setattr__(self, "v_palette", _freeze(self.v_palette))

    @property
    def u_dim(self) -> int:
        return len(self.class_means[0])

    @property
    def v_dim(self) -> int:
        return len(self.v_palette[0])

    @property
    def dim(self) -> int:
        return self.u_dim + self.v_dim

    def validate(self) -> None:
        means = np.asarray(self.class_means, dtype=np.float64)
        palette = np.asarray(self.v_palette, dtype=np.float64)
        if means.shape[0] != self.num_classes:
            raise ValueError(f"{self.name}: {means.shape[0]} class means for "
                             f"{self.num_classes} classes")
        if self.u_noise_sigma <= 0:
            raise ValueError(f"{self.name}: u_noise_sigma must be positive")
        if self.n_samples <= 0:
            raise ValueError(f"{self.name}: n_samples must be positive")
        if self.v_assignment not in V_ASSIGNMENTS:
            raise ValueError(f"{self.name}: unknown v_assignment {self.v_assignment!r}")
        if palette.shape[0] < 2:
            raise ValueError(f"{self.name}: palette needs at least 2 prototypes")
        if self.v_assignment == "label_correlated":
            lo = 1.0 / palette.shape[0]
            if not (lo <= self.correlation_p <= 1.0):
                raise ValueError(
                    f"{self.name}: correlation P={self.correlation_p} outside "
                    f"[{lo}, 1]")
        # classes must be solvable from U alone
        min_sep = np.inf
        for i in range(means.shape[0]):
            for jj in range(i + 1, means.shape[0]):
                min_sep = min(min_sep, float(np.linalg.norm(means[i] - means[jj])))
        if min_sep < 4.0 * self.u_noise_sigma:
            raise ValueError(
                f"{self.name}: class means separated by {min_sep:.3g} < "
                f"4 * u_noise_sigma = {4 * self.u_noise_sigma:.3g}")

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "num_classes": self.num_classes,
            "class_means": self.class_means,
            "u_noise_sigma": self.u_noise_sigma,
            "v_palette": self.v_palette,
            "v_assignment": self.v_assignment,
            "correlation_p": self.correlation_p,
            "n_samples": self.n_samples,
            "seed": self.seed,
        }


def _freeze(nested) -> tuple:
    return tuple(tuple(float(x) for x in row) for row in np.asarray(nested, dtype=np.float64))


def spec_hash(spec: DomainSpec) -> str:
    text = repr(sorted(spec.to_dict().items()))
    return hashlib.sha256(text.encode("ascii")).hexdigest()[:16]


@dataclass
class Dataset:
    features: np.ndarray          # (n, d) float64
    labels: np.ndarray            # (n,) int
    domains: np.ndarray           # (n,) str tags
    spec_hash: str = ""
    prototype_ids: np.ndarray | None = None  # generation-time aux, not serialized

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.domains = np.asarray(self.domains, dtype=object)

    @property
    def n(self) -> int:
        return int(self.features.shape[0])

    @property
    def dim(self) -> int:
        return int(self.features.shape[1])


def random_rotation(dim: int, seed: int) -> np.ndarray:
    """Deterministic orthonormal matrix via QR with a canonical sign fix."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 90]))
    q, r = np.linalg.qr(rng.standard_normal((dim, dim)))
    return np.ascontiguousarray(q * np.sign(np.diag(r)))


def gen_domain(spec: DomainSpec, rotation: np.ndarray | None = None) -> Dataset:
    """Sample one domain; deterministic in (spec, spec.seed).

    ``rotation`` is the experiment-wide mixing matrix; None keeps the raw
    U,V axes (the identity option used by ground-truth test oracles).
    """
    spec.validate()
    means = np.asarray(spec.class_means, dtype=np.float64)
    palette = np.asarray(spec.v_palette, dtype=np.float64)
    n, n_pal = spec.n_samples, palette.shape[0]
    if rotation is not None and rotation.shape != (spec.dim, spec.dim):
        raise ValueError(f"rotation shape {rotation.shape} does not match "
                         f"feature dim {spec.dim}")

    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 17]))
    labels = rng.integers(0, spec.num_classes, size=n)
    u = means[labels] + spec.u_noise_sigma * rng.standard_normal((n, spec.u_dim))
    if spec.v_assignment == "label_correlated":
        designated = labels % n_pal
        keep = rng.random(n) < spec.correlation_p
        alt = rng.integers(0, n_pal - 1, size=n)
        alt = alt + (alt >= designated)  # uniform over the non-designated rest
        proto = np.where(keep, designated, alt)
    else:
        proto = rng.integers(0, n_pal, size=n)
    v = palette[proto] + (spec.u_noise_sigma / 4.0) * rng.standard_normal((n, spec.v_dim))

    raw = np.hstack([u, v])
    feats = raw if rotation is None else raw @ rotation.T
    return Dataset(feats, labels, np.full(n, spec.name, dtype=object),
                   spec_hash=spec_hash(spec), prototype_ids=proto)


@dataclass
class ExperimentData:
    """One adaptation problem: labeled source, unlabeled target mixture,
    and held-out domains never shown to training."""

    source: Dataset
    target: Dataset
    target_parts: list[Dataset]
    unseen: list[Dataset]
    rotation: np.ndarray | None
    specs: dict


def _concat(datasets: list[Dataset]) -> Dataset:
    return Dataset(np.vstack([d.features for d in datasets]),
                   np.concatenate([d.labels for d in datasets]),
                   np.concatenate([d.domains for d in datasets]),
                   spec_hash="+".join(d.spec_hash for d in datasets))


def gen_experiment(source_spec: DomainSpec, target_specs: list[DomainSpec],
                   unseen_specs: list[DomainSpec] = (),
                   rotation_seed: int = 0,
                   rotation: str = "random") -> ExperimentData:
    """Generate all domains of one experiment over a shared rotation.

    Specs must agree on the class structure (K, U dimensionality, class
    means); palettes and assignment rules are exactly what may differ.
    """
    if not target_specs:
        raise ValueError("need at least one target spec")
    all_specs = [source_spec, *target_specs, *unseen_specs]
    ref = source_spec
    for s in all_specs[1:]:
        if (s.num_classes != ref.num_classes or s.u_dim != ref.u_dim
                or s.v_dim != ref.v_dim or s.class_means != ref.class_means):
            raise ValueError(
                f"domain {s.name!r} does not share the class structure of "
                f"{ref.name!r}")
    if rotation == "random":
        rot = random_rotation(ref.dim, rotation_seed)
    elif rotation == "identity":
        rot = None
    else:
        raise ValueError(f"unknown rotation option {rotation!r}")

    source = gen_domain(source_spec, rot)
    parts = [gen_domain(s, rot) for s in target_specs]
    unseen = [gen_domain(s, rot) for s in unseen_specs]
    return ExperimentData(
        source=source,
        target=_concat(parts),
        target_parts=parts,
        unseen=unseen,
        rotation=rot,
        specs={"source": source_spec.to_dict(),
               "targets": [s.to_dict() for s in target_specs],
               "unseen": [s.to_dict() for s in unseen_specs],
               "rotation": rotation, "rotation_seed": rotation_seed})


# ---------------------------------------------------------------------
# default experiment family
# ---------------------------------------------------------------------

@dataclass
class DataConfig:
    """Generator knobs for the default colored-domains experiment."""

    num_classes: int = 2
    u_dim: int = 8
    v_dim: int = 8
    palette_size: int = 4
    n_samples: int = 1000
    u_noise_sigma: float = 0.5
    class_separation: float = 3.0
    v_magnitude: float = 6.0
    p: float = 0.95
    num_targets: int = 1
    include_unseen: bool = True
    rotation: str = "random"

    def validate(self) -> None:
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if min(self.u_dim, self.v_dim, self.palette_size, self.n_samples,
               self.num_targets) < 1:
            raise ValueError("dims, palette size, sample and target counts must be positive")
        if self.u_noise_sigma <= 0 or self.class_separation <= 0 or self.v_magnitude <= 0:
            raise ValueError("sigma, separation and magnitude must be positive")
        if self.class_separation < 4 * self.u_noise_sigma:
            raise ValueError("class_separation must be >= 4 * u_noise_sigma")
        if not (1.0 / self.palette_size <= self.p <= 1.0):
            raise ValueError(f"p outside [{1.0 / self.palette_size}, 1]")
        if self.rotation not in ("random", "identity"):
            raise ValueError(f"unknown rotation option {self.rotation!r}")
        max_offset = self.num_targets + (1 if self.include_unseen else 0)
        if 2 * (max_offset + 1) > self.v_dim:
            raise ValueError("v_dim too small for the requested distinct palettes")


def default_class_means(num_classes: int, u_dim: int, separation: float) -> np.ndarray:
    """Class k sits at separation * e_k; pairwise distances >= separation."""
    if num_classes > u_dim + 1:
        raise ValueError("need u_dim + 1 >= num_classes to place the means")
    means = np.zeros((num_classes, u_dim))
    for k in range(1, num_classes):
        means[k, k - 1] = separation
    return means


def axis_palette(palette_size: int, v_dim: int, magnitude: float,
                 axis_offset: int = 0) -> np.ndarray:
    """Prototypes at +-magnitude along paired axes; ``axis_offset`` shifts
    to fresh axes so palettes of different domains share no prototypes."""
    n_axes = (palette_size + 1) // 2
    if 2 * (axis_offset + n_axes) > 2 * v_dim:
        raise ValueError("not enough v axes for this palette")
    protos = np.zeros((palette_size, v_dim))
    for i in range(palette_size):
        axis = (2 * axis_offset + i // 2) % v_dim
        protos[i, axis] = magnitude if i % 2 == 0 else -magnitude
    return protos


def _derive_seed(seed: int, tag: int) -> int:
    return int(np.random.SeedSequence([seed, tag]).generate_state(1)[0])


def build_experiment(cfg: DataConfig, p: float | None = None,
                     seed: int = 0) -> ExperimentData:
    """The default colored-domains task: correlated source, uniformly
    colored target(s), and optionally one unseen domain with a palette
    disjoint from everything trained on."""
    cfg = replace(cfg, p=cfg.p if p is None else float(p))
    cfg.validate()
    means = default_class_means(cfg.num_classes, cfg.u_dim, cfg.class_separation)

    def spec(name, assignment, p_corr, axis_offset, tag):
        return DomainSpec(
            name=name, num_classes=cfg.num_classes, class_means=means,
            u_noise_sigma=cfg.u_noise_sigma,
            v_palette=axis_palette(cfg.palette_size, cfg.v_dim, cfg.v_magnitude,
                                   axis_offset),
            v_assignment=assignment, correlation_p=p_corr,
            n_samples=cfg.n_samples, seed=_derive_seed(seed, tag))

    source = spec("source", "label_correlated", cfg.p, 0, 100)
    if cfg.num_targets == 1:
        targets = [spec("target", "uniform_random", cfg.p, 0, 200)]
    else:
        targets = [spec(f"target{i}", "uniform_random", cfg.p, i, 200 + i)
                   for i in range(cfg.num_targets)]
    unseen = []
    if cfg.include_unseen:
        unseen = [spec("unseen", "uniform_random", cfg.p, cfg.num_targets, 300)]
    return gen_experiment(source, targets, unseen,
                          rotation_seed=_derive_seed(seed, 400),
                          rotation=cfg.rotation)


# ---------------------------------------------------------------------
# delimited-text dataset files
# ---------------------------------------------------------------------

def write_dataset(dataset: Dataset, path) -> None:
    d = dataset.dim
    lines = [",".join([f"f{i}" for i in range(d)] + ["label", "domain"])]
    for row, label, dom in zip(dataset.features, dataset.labels, dataset.domains):
        if "," in str(dom) or "\n" in str(dom):
            raise ValueError(f"domain tag {dom!r} contains a delimiter")
        cells = ["%.17g" % v for v in row] + [str(int(label)), str(dom)]
        lines.append(",".join(cells))
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines) + "\n")


def read_dataset(path) -> Dataset:
    with open(path, "r", encoding="ascii") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise ValueError(f"{path}: empty file, expected a header row")
    header = lines[0].split(",")
    if len(header) < 3 or header[-2:] != ["label", "domain"]:
        raise ValueError(f"{path}: malformed header {lines[0]!r}")
    d = len(header) - 2
    if header[:d] != [f"f{i}" for i in range(d)]:
        raise ValueError(f"{path}: malformed feature columns in header")
    feats, labels, doms = [], [], []
    for rownum, line in enumerate(lines[1:], start=1):
        cells = line.split(",")
        if len(cells) != d + 2:
            raise ValueError(
                f"{path}: row {rownum} has {len(cells)} columns, expected {d + 2}")
        try:
            feats.append([float(c) for c in cells[:d]])
        except ValueError:
            raise ValueError(f"{path}: row {rownum} has a non-numeric feature cell") from None
        try:
            labels.append(int(cells[d]))
        except ValueError:
            raise ValueError(f"{path}: row {rownum} has a non-integer label") from None
        doms.append(cells[d + 1])
    feats_arr = (np.asarray(feats, dtype=np.float64)
                 if feats else np.zeros((0, d), dtype=np.float64))
    return Dataset(feats_arr, np.asarray(labels, dtype=np.int64),
                   np.asarray(doms, dtype=object))
