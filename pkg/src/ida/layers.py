"""Parameterized building blocks: plain MLPs and the intervention attention.

The model bundle wires five pieces together: a feature extractor, a
domain-invariant mapper, a label classifier, a domain discriminator, and
the attention network that produces per-component intervention switches
for counterfactual mixing.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

HIDDEN_ACTIVATIONS = ("relu",)
OUTPUT_ACTIVATIONS = ("identity", "sigmoid", "softmax")


@dataclass(frozen=True)
class MlpSpec:
    """Layer widths plus activation choices for a fully-connected net."""

    layer_sizes: tuple[int, ...]
    hidden_activation: str = "relu"
    output_activation: str = "identity"

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        object.__setattr__(self, "layer_sizes", sizes)
        if len(sizes) < 2:
            raise ValueError(f"MlpSpec needs at least two sizes, got {sizes}")
        if any(s <= 0 for s in sizes):
            raise ValueError(f"MlpSpec sizes must be positive, got {sizes}")
        if self.hidden_activation not in HIDDEN_ACTIVATIONS:
            raise ValueError(f"unknown hidden activation {self.hidden_activation!r}")
        if self.output_activation not in OUTPUT_ACTIVATIONS:
            raise ValueError(f"unknown output activation {self.output_activation!r}")

    @property
    def in_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def out_dim(self) -> int:
        return self.layer_sizes[-1]

    @property
    def n_layers(self) -> int:
        return len(self.layer_sizes) - 1


@dataclass(frozen=True)
class AttentionSpec:
    """Intervention attention: concat of two parent features -> switch vector.

    The output dimension always equals the feature dimension at the
    intervention site, and the final activation is a sigmoid so every
    switch component lies in (0, 1).
    """

    input_dim: int
    hidden_dim: int

    def __post_init__(self):
        if self.input_dim <= 0 or self.hidden_dim <= 0:
            raise ValueError("AttentionSpec dims must be positive")

    @property
    def output_dim(self) -> int:
        return self.input_dim

    def mlp_spec(self) -> MlpSpec:
        return MlpSpec((2 * self.input_dim, self.hidden_dim, self.input_dim),
                       hidden_activation="relu", output_activation="sigmoid")


class MlpModel:
    """An MlpSpec plus its parameters; forward runs on the active tape."""

    def __init__(self, spec: MlpSpec, weights: list[Tensor], biases: list[Tensor]):
        self.spec = spec
        self.weights = weights
        self.biases = biases

    @classmethod
    def init(cls, spec: MlpSpec, rng: np.random.Generator) -> "MlpModel":
        """Uniform(-s, s) weights with s = sqrt(6 / (fan_in + fan_out)); zero biases."""
        weights, biases = [], []
        for fan_in, fan_out in zip(spec.layer_sizes[:-1], spec.layer_sizes[1:]):
            s = np.sqrt(6.0 / (fan_in + fan_out))
            weights.append(Tensor(rng.uniform(-s, s, size=(fan_in, fan_out))))
            biases.append(Tensor(np.zeros(fan_out)))
        return cls(spec, weights, biases)

    def forward(self, x: Tensor, start: int = 0, stop: int | None = None) -> Tensor:
        """Apply layers [start, stop); stop=None means through the output.

        The output activation fires only when the final layer is included.
        """
        n = self.spec.n_layers
        stop = n if stop is None else stop
        if not (0 <= start <= stop <= n):
            raise ValueError(f"invalid layer range [{start}, {stop}) for {n} layers")
        for i in range(start, stop):
            x = ad.add_bias(ad.matmul(x, self.weights[i]), self.biases[i])
            if i < n - 1:
                x = ad.relu(x)
            elif self.spec.output_activation == "sigmoid":
                x = ad.sigmoid(x)
            elif self.spec.output_activation == "softmax":
                x = ad.softmax_rows(x)
        return x

    def parameters(self, prefix: str) -> list[tuple[str, Tensor]]:
        params = []
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            params.append((f"{prefix}.w{i}", w))
            params.append((f"{prefix}.b{i}", b))
        return params

    def clone(self) -> "MlpModel":
        return MlpModel(self.spec,
                        [Tensor(w.values.copy()) for w in self.weights],
                        [Tensor(b.values.copy()) for b in self.biases])


def attention_forward(x_a: Tensor, x_b: Tensor, attention: MlpModel) -> Tensor:
    """Switch vector a = sigmoid(MLP(concat(x_a, x_b))), componentwise in (0, 1).

    Accepts single feature vectors or (m, n) batches; the order of the two
    parents matters (the switch decides what is inherited from each side).
    """
    if x_a.values.shape != x_b.values.shape:
        raise ad.ShapeError(
            f"attention_forward: parent shapes {x_a.values.shape} and "
            f"{x_b.values.shape} differ")
    single = x_a.values.ndim == 1
    if single:
        n = x_a.values.shape[0]
        x_a = ad.reshape(x_a, (1, n))
        x_b = ad.reshape(x_b, (1, n))
    n = x_a.values.shape[1]
    if 2 * n != attention.spec.in_dim:
        raise ad.ShapeError(
            f"attention_forward: feature dim {n} does not match attention "
            f"input dim {attention.spec.in_dim}")
    a = attention.forward(ad.concat_cols(x_a, x_b))
    if single:
        a = ad.reshape(a, (n,))
    return a


@dataclass
class ModelBundle:
    """All trainable pieces plus the schedule-controlled reversal strengths.

    ``intervention_layer`` is the 1-based extractor layer after which
    counterfactual mixing happens; by default it is the last one, so the
    intervention site is the extractor output feeding the mapper.
    """

    extractor: MlpModel
    mapper: MlpModel
    classifier: MlpModel
    discriminator: MlpModel
    attention: MlpModel
    intervention_layer: int
    grl_lambda_domain: float = 0.0
    grl_lambda_attention: float = 0.0

    @property
    def site_dim(self) -> int:
        return self.extractor.spec.layer_sizes[self.intervention_layer]

    def parameters(self) -> list[tuple[str, Tensor]]:
        params = []
        for prefix, model in (("E", self.extractor), ("M", self.mapper),
                              ("C", self.classifier), ("D", self.discriminator),
                              ("A", self.attention)):
            params.extend(model.parameters(prefix))
        return params

    def clone(self) -> "ModelBundle":
        return ModelBundle(self.extractor.clone(), self.mapper.clone(),
                           self.classifier.clone(), self.discriminator.clone(),
                           self.attention.clone(), self.intervention_layer,
                           self.grl_lambda_domain, self.grl_lambda_attention)

    # -- evaluation-mode helpers (plain arrays in, plain arrays out) ----

    def site_features(self, x: np.ndarray) -> np.ndarray:
        t = self.extractor.forward(Tensor(x), stop=self.intervention_layer)
        return t.values

    def features(self, x: np.ndarray) -> np.ndarray:
        """Adaptation-layer representation F = M(E(x))."""
        e = self.extractor.forward(Tensor(x))
        return self.mapper.forward(e).values

    def logits(self, x: np.ndarray) -> np.ndarray:
        e = self.extractor.forward(Tensor(x))
        return self.classifier.forward(self.mapper.forward(e)).values


def validate_bundle(bundle: ModelBundle) -> None:
    """Reject dimension mismatches, naming the offending pair."""
    e_spec = bundle.extractor.spec
    if not (1 <= bundle.intervention_layer <= e_spec.n_layers):
        raise ValueError(
            f"intervention layer {bundle.intervention_layer} outside extractor "
            f"range 1..{e_spec.n_layers}")
    site = e_spec.layer_sizes[bundle.intervention_layer]
    att_in = bundle.attention.spec.in_dim
    if att_in != 2 * site:
        raise ValueError(
            f"dimension mismatch: attention input {att_in} vs "
            f"2 x intervention-site width {2 * site}")
    if bundle.attention.spec.out_dim != site:
        raise ValueError(
            f"dimension mismatch: attention output {bundle.attention.spec.out_dim} "
            f"vs intervention-site width {site}")
    if bundle.mapper.spec.in_dim != e_spec.out_dim:
        raise ValueError(
            f"dimension mismatch: mapper input {bundle.mapper.spec.in_dim} vs "
            f"extractor output {e_spec.out_dim}")
    for name, model in (("classifier", bundle.classifier),
                        ("discriminator", bundle.discriminator)):
        if model.spec.in_dim != bundle.mapper.spec.out_dim:
            raise ValueError(
                f"dimension mismatch: {name} input {model.spec.in_dim} vs "
                f"mapper output {bundle.mapper.spec.out_dim}")
    if bundle.discriminator.spec.out_dim != 1 or \
            bundle.discriminator.spec.output_activation != "sigmoid":
        raise ValueError("discriminator must end in a single sigmoid unit")


def init_model(config, seed: int) -> ModelBundle:
    """Build a fresh bundle from a TrainConfig-like object, deterministically.

    Sub-networks draw from independent child streams of the seed, so
    resizing one piece never shifts another's initialization.
    """
    d = int(config.input_dim)
    hidden = tuple(int(h) for h in config.extractor_hidden)
    e_sizes = (d,) + hidden
    e_spec = MlpSpec(e_sizes)
    n_layers = e_spec.n_layers
    layer = config.intervention_layer
    layer = n_layers if layer in (None, -1) else int(layer)
    if not (1 <= layer <= n_layers):
        raise ValueError(
            f"intervention layer {layer} outside extractor range 1..{n_layers}")
    site = e_sizes[layer]

    m_spec = MlpSpec((e_spec.out_dim, int(config.mapper_out)))
    c_spec = MlpSpec((m_spec.out_dim, int(config.num_classes)))
    disc_hidden = tuple(int(h) for h in getattr(config, "discriminator_hidden", ()))
    d_spec = MlpSpec((m_spec.out_dim, *disc_hidden, 1), output_activation="sigmoid")
    a_spec = AttentionSpec(site, int(config.attention_hidden)).mlp_spec()

    streams = [np.random.default_rng(s)
               for s in np.random.SeedSequence(seed).spawn(5)]
    bundle = ModelBundle(
        extractor=MlpModel.init(e_spec, streams[0]),
        mapper=MlpModel.init(m_spec, streams[1]),
        classifier=MlpModel.init(c_spec, streams[2]),
        discriminator=MlpModel.init(d_spec, streams[3]),
        attention=MlpModel.init(a_spec, streams[4]),
        intervention_layer=layer,
    )
    validate_bundle(bundle)
    return bundle


# ---------------------------------------------------------------------
# parameter persistence: textual key -> array dump, bit-exact round trip
# ---------------------------------------------------------------------

def save_params(bundle: ModelBundle, path) -> None:
    lines = ["ida-params 1"]
    for name, tensor in bundle.parameters():
        dims = ",".join(str(s) for s in tensor.values.shape)
        vals = " ".join("%.17g" % v for v in tensor.values.reshape(-1))
        lines.append(f"{name} {dims}")
        lines.append(vals)
    text = "\n".join(lines) + "\n"
    with open(path, "w", encoding="ascii") as fh:
        fh.write(text)


def load_params(bundle: ModelBundle, path) -> None:
    """Load a dump written by save_params into an existing bundle, in place."""
    with open(path, "r", encoding="ascii") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != "ida-params 1":
        raise ValueError(f"{path}: not a parameter dump")
    entries = {}
    i = 1
    while i < len(lines):
        if not lines[i].strip():
            i += 1
            continue
        name, dims = lines[i].split(" ", 1)
        shape = tuple(int(s) for s in dims.split(","))
        vals = np.array([float(v) for v in lines[i + 1].split()], dtype=np.float64)
        if vals.size != int(np.prod(shape, dtype=np.int64)):
            raise ValueError(f"{path}: value count for {name} does not match shape {shape}")
        entries[name] = vals.reshape(shape)
        i += 2
    for name, tensor in bundle.parameters():
        if name not in entries:
            raise ValueError(f"{path}: missing parameter {name}")
        arr = entries.pop(name)
        if arr.shape != tensor.values.shape:
            raise ValueError(
                f"{path}: shape {arr.shape} for {name} does not match model "
                f"shape {tensor.values.shape}")
        tensor.values[...] = arr
    if entries:
        raise ValueError(f"{path}: unknown parameters {sorted(entries)}")
