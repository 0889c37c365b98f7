"""Label/domain encoders, additive disentanglement, latent remix and the heads."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, fields
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tape, Tensor
from .data.domains import CompositeBatch
from .errors import ConfigError, ContractError, DimensionError

logger = logging.getLogger(__name__)

CONTRASTIVE_TARGETS = ("label", "dinv", "both")
PREDICT_FROM = ("label", "dinv")


@dataclass
class AdrmxConfig:
    d_in: int
    num_classes: int
    num_domains: int
    latent_dim: int = 64
    encoder_hidden: tuple[int, ...] = (256, 128)
    disc_hidden: tuple[int, ...] = (128, 128)
    lam: float = 1.0
    temperature: float = 1.0
    use_remix: bool = True
    use_contrastive: bool = True
    contrastive_on: str = "both"
    dinv_uses_shared_head: bool = True
    # "dinv" scores f_clf(x_label - x_domain) at inference, an ablation only
    predict_from: str = "label"
    w_ce_label: float = 1.0
    w_ce_domain: float = 1.0
    w_ce_dinv: float = 1.0
    # inverted dropout on encoder hidden activations during generator steps
    dropout: float = 0.0

    def __post_init__(self):
        self.encoder_hidden = tuple(int(h) for h in self.encoder_hidden)
        self.disc_hidden = tuple(int(h) for h in self.disc_hidden)
        if self.lam < 0:
            raise ConfigError(f"lam must be >= 0, got {self.lam}")
        if self.temperature <= 0:
            raise ConfigError(f"temperature must be > 0, got {self.temperature}")
        if self.num_domains < 2:
            raise ConfigError(f"num_domains must be >= 2, got {self.num_domains}")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        for name in ("d_in", "latent_dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.contrastive_on not in CONTRASTIVE_TARGETS:
            raise ConfigError(f"contrastive_on must be one of {CONTRASTIVE_TARGETS}, got {self.contrastive_on!r}")
        if self.predict_from not in PREDICT_FROM:
            raise ConfigError(f"predict_from must be one of {PREDICT_FROM}, got {self.predict_from!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder_hidden"] = list(self.encoder_hidden)
        d["disc_hidden"] = list(self.disc_hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AdrmxConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


class Mlp:
    """Stack of affine layers with ReLU between them (none after the last)."""

    def __init__(self, name: str, sizes: list[int], rng: np.random.Generator):
        self.name = name
        self.sizes = list(sizes)
        self.weights: list[Parameter] = []
        self.biases: list[Parameter] = []
        for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            bound = 1.0 / np.sqrt(fan_in)
            self.weights.append(Parameter(f"{name}.{i}.weight", rng.uniform(-bound, bound, (fan_in, fan_out))))
            self.biases.append(Parameter(f"{name}.{i}.bias", np.zeros(fan_out)))

    def parameters(self) -> list[Parameter]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def __call__(self, x: Tensor, tape: Tape | None = None, dropout: float = 0.0,
                 rng: np.random.Generator | None = None) -> Tensor:
        """Forward pass; with ``tape`` the weights are watched, otherwise constants.

        A positive ``dropout`` (with ``rng``) masks hidden activations and
        rescales the survivors by 1 / (1 - dropout).
        """
        if x.shape[-1] != self.sizes[0]:
            raise DimensionError(f"{self.name}: expected input width {self.sizes[0]}, got {x.shape}")
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            wt = tape.watch(w) if tape is not None else Tensor(w.value)
            bt = tape.watch(b) if tape is not None else Tensor(b.value)
            x = ad.bias_add(ad.matmul(x, wt), bt)
            if i < last:
                x = ad.relu(x)
                if dropout > 0.0 and rng is not None:
                    keep = rng.random(x.shape) >= dropout
                    x = ad.mul(x, Tensor(keep / (1.0 - dropout)))
        return x

    def numpy_forward(self, x: np.ndarray) -> np.ndarray:
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            x = x @ w.value + b.value
            if i < last:
                x = np.maximum(x, 0.0)
        return x


class AdrmxParams:
    """All trainable parameters, grouped by module.

    The generator side is everything except ``discriminator``.
    """

    GENERATOR = ("label_encoder", "domain_encoder", "label_classifier", "domain_classifier", "dinv_classifier")

    def __init__(self, config: AdrmxConfig, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.config = c = config
        d = c.latent_dim
        self.label_encoder = Mlp("label_encoder", [c.d_in, *c.encoder_hidden, d], rng)
        self.domain_encoder = Mlp("domain_encoder", [c.d_in, *c.encoder_hidden, d], rng)
        self.label_classifier = Mlp("label_classifier", [d, c.num_classes], rng)
        self.domain_classifier = Mlp("domain_classifier", [d, c.num_domains], rng)
        self.discriminator = Mlp("discriminator", [d, *c.disc_hidden, c.num_domains], rng)
        self.dinv_classifier = None if c.dinv_uses_shared_head else Mlp("dinv_classifier", [d, c.num_classes], rng)

    def modules(self) -> Iterator[Mlp]:
        for name in self.GENERATOR + ("discriminator",):
            m = getattr(self, name)
            if m is not None:
                yield m

    def generator_parameters(self) -> list[Parameter]:
        out = []
        for name in self.GENERATOR:
            m = getattr(self, name)
            if m is not None:
                out += m.parameters()
        return out

    def discriminator_parameters(self) -> list[Parameter]:
        return self.discriminator.parameters()

    def parameters(self) -> list[Parameter]:
        return self.generator_parameters() + self.discriminator_parameters()

    def named(self) -> dict[str, Parameter]:
        return {p.name: p for p in self.parameters()}

    def state_dict(self) -> dict[str, np.ndarray]:
        return {p.name: p.value.copy() for p in self.parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        named = self.named()
        missing = set(named) - set(state)
        extra = set(state) - set(named)
        if missing or extra:
            raise DimensionError(f"parameter names differ: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, p in named.items():
            v = np.asarray(state[name], dtype=np.float64)
            if v.shape != p.value.shape:
                raise DimensionError(f"{name}: checkpoint shape {v.shape} vs model shape {p.value.shape}")
            p.value = v.copy()


def encode(params: AdrmxParams, inputs: Tensor, tape: Tape | None = None, dropout: float = 0.0,
           rng: np.random.Generator | None = None) -> tuple[Tensor, Tensor]:
    """Independent forward passes of the label and domain encoders."""
    return (params.label_encoder(inputs, tape, dropout, rng),
            params.domain_encoder(inputs, tape, dropout, rng))


def disentangle(x_label: Tensor, x_domain: Tensor) -> Tensor:
    return ad.sub(x_label, x_domain)


def remix(x_dinv: Tensor, x_domain_other: Tensor) -> Tensor:
    return ad.add(x_dinv, x_domain_other)


def remix_pairing(labels, domains, rng: np.random.Generator) -> np.ndarray:
    """One partner per anchor: same label, different domain, chosen uniformly.

    Returns an (R, 2) int array of (anchor, partner) rows; anchors without an
    eligible partner are left out.
    """
    labels = np.asarray(labels)
    domains = np.asarray(domains)
    eligible = (labels[:, None] == labels[None, :]) & (domains[:, None] != domains[None, :])
    counts = eligible.sum(axis=1)
    anchors = np.flatnonzero(counts)
    if anchors.size == 0:
        return np.zeros((0, 2), dtype=np.int64)
    pick = rng.integers(0, counts[anchors])
    # k-th eligible column of each anchor row: first column whose running count exceeds k
    ranks = np.cumsum(eligible[anchors], axis=1)
    partners = np.argmax(ranks > pick[:, None], axis=1)
    return np.stack([anchors, partners], axis=1).astype(np.int64)


def check_pairs(pairs: np.ndarray, labels, domains) -> None:
    labels = np.asarray(labels)
    domains = np.asarray(domains)
    if pairs.size == 0:
        return
    a, p = pairs[:, 0], pairs[:, 1]
    if np.any(labels[a] != labels[p]) or np.any(domains[a] == domains[p]):
        raise ContractError("remix pair violates same-label / different-domain rule")


@dataclass
class ForwardArtifacts:
    x_label: Tensor
    x_domain: Tensor
    x_dinv: Tensor
    logits_label: Tensor
    logits_dinv: Tensor
    logits_domain: Tensor
    logits_disc: Tensor
    labels: np.ndarray
    domains: np.ndarray
    remix_pairs: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), dtype=np.int64))
    x_remixed: Tensor | None = None
    logits_remix: Tensor | None = None


def forward_train(params: AdrmxParams, batch: CompositeBatch, config: AdrmxConfig,
                  rng: np.random.Generator, tape: Tape | None = None,
                  pairs: np.ndarray | None = None) -> ForwardArtifacts:
    """Generator-side forward pass.

    Encoder and classifier weights are watched on ``tape``; the discriminator
    weights enter as constants, so the adversarial term only reaches the
    encoders. ``pairs`` overrides the random remix pairing.
    """
    if len(np.unique(batch.domains)) < 2:
        logger.warning("composite batch holds a single domain; remix loss contributes zero")
    x = Tensor(batch.inputs)
    x_label, x_domain = encode(params, x, tape, config.dropout, rng)
    x_dinv = disentangle(x_label, x_domain)
    clf = params.label_classifier
    dinv_head = clf if config.dinv_uses_shared_head else params.dinv_classifier
    art = ForwardArtifacts(
        x_label=x_label,
        x_domain=x_domain,
        x_dinv=x_dinv,
        logits_label=clf(x_label, tape),
        logits_dinv=dinv_head(x_dinv, tape),
        logits_domain=params.domain_classifier(x_domain, tape),
        logits_disc=params.discriminator(x_dinv, None),
        labels=np.asarray(batch.labels),
        domains=np.asarray(batch.domains),
    )
    if config.use_remix:
        if pairs is None:
            pairs = remix_pairing(batch.labels, batch.domains, rng)
        check_pairs(pairs, batch.labels, batch.domains)
        art.remix_pairs = pairs
        if pairs.shape[0]:
            art.x_remixed = remix(ad.gather_rows(x_dinv, pairs[:, 0]), ad.gather_rows(x_domain, pairs[:, 1]))
            art.logits_remix = clf(art.x_remixed, tape)
    return art


def predict(params: AdrmxParams, inputs: np.ndarray, from_dinv: bool = False) -> np.ndarray:
    """Class probabilities from the label encoder and label classifier only.

    ``from_dinv`` instead scores ``x_label - x_domain`` (needs the domain
    encoder); it exists for the ablation study.
    """
    inputs = np.asarray(inputs, dtype=np.float64)
    if inputs.ndim != 2 or inputs.shape[1] != params.label_encoder.sizes[0]:
        raise DimensionError(f"predict: expected (N, {params.label_encoder.sizes[0]}) inputs, got {inputs.shape}")
    z = params.label_encoder.numpy_forward(inputs)
    if from_dinv:
        z = z - params.domain_encoder.numpy_forward(inputs)
    return ad.softmax(params.label_classifier.numpy_forward(z))


def embed(params: AdrmxParams, inputs: np.ndarray) -> dict[str, np.ndarray]:
    """x_label, x_domain and x_dinv as plain arrays."""
    inputs = np.asarray(inputs, dtype=np.float64)
    x_label = params.label_encoder.numpy_forward(inputs)
    x_domain = params.domain_encoder.numpy_forward(inputs)
    return {"label": x_label, "domain": x_domain, "dinv": x_label - x_domain}
