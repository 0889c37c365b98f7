"""Training objectives: cross-entropies, supervised contrastive, remix, adversarial."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, DimensionError, DivergenceError
from .model import AdrmxConfig, ForwardArtifacts


def supcon_loss(z: Tensor, labels, temperature: float = 1.0) -> Tensor:
    """In-batch supervised contrastive loss on unit-norm rows.

    For anchor i with positives P(i) (same label, excluding i) and
    A(i) = all rows except i::

        l_i = -1/|P(i)| * sum_p log( exp(z_i.z_p / t) / sum_{a in A(i)} exp(z_i.z_a / t) )

    Anchors without positives are skipped; the result is the mean of l_i over
    the remaining anchors (0 when there are none).
    """
    if z.data.ndim != 2:
        raise DimensionError(f"supcon_loss needs (B, d) features, got {z.shape}")
    B = z.shape[0]
    labels = np.asarray(labels).reshape(-1)
    if B < 2:
        raise DimensionError(f"supcon_loss needs at least 2 rows, got {B}")
    if labels.shape[0] != B:
        raise DimensionError(f"supcon_loss: {B} rows but {labels.shape[0]} labels")
    norms = np.sqrt(np.einsum("ij,ij->i", z.data, z.data))
    if np.any(np.abs(norms - 1.0) > 1e-6):
        bad = int(np.argmax(np.abs(norms - 1.0)))
        raise ContractError(f"supcon_loss: row {bad} has norm {norms[bad]:.9f}, expected unit rows")

    Z = z.data
    t = float(temperature)
    eye = np.eye(B, dtype=bool)
    pos = (labels[:, None] == labels[None, :]) & ~eye
    n_pos = pos.sum(axis=1)
    anchors = n_pos > 0
    n_anchor = int(anchors.sum())
    if n_anchor == 0:
        return ad.emit("supcon", (z,), np.array(0.0), lambda g: (np.zeros_like(Z),))

    sim = (Z @ Z.T) / t
    masked = np.where(eye, -np.inf, sim)
    top = masked.argmax(axis=1)
    row_max = masked[np.arange(B), top]
    # log-sum-exp as m + log1p(rest): well separated batches give losses near 1e-8,
    # which a plain log(sum) - s_p would bury in cancellation
    rest = np.exp(masked - row_max[:, None])
    rest[np.arange(B), top] = 0.0
    lse_rel = np.log1p(rest.sum(axis=1))
    log_denom = row_max + lse_rel
    safe_pos = np.maximum(n_pos, 1)
    gap_to_max = np.where(pos, row_max[:, None] - sim, 0.0).sum(axis=1) / safe_pos
    per_anchor = lse_rel + gap_to_max
    loss = per_anchor[anchors].sum() / n_anchor

    def bw(g):
        soft = np.exp(masked - log_denom[:, None])  # zero on the diagonal
        G = soft - pos / safe_pos[:, None]
        G[~anchors] = 0.0
        G *= float(g) / n_anchor
        return (((G + G.T) @ Z) / t,)

    return ad.emit("supcon", (z,), np.array(loss), bw)


def cross_entropy(logits: Tensor, targets) -> Tensor:
    return ad.softmax_cross_entropy(logits, targets)


def remix_loss(logits_remix: Tensor | None, labels_remix) -> Tensor:
    """Mean cross-entropy over the remixed samples; 0 when there are none."""
    labels_remix = np.asarray(labels_remix).reshape(-1)
    if logits_remix is None or labels_remix.size == 0:
        return ad.constant(0.0)
    return ad.softmax_cross_entropy(logits_remix, labels_remix)


def discriminator_loss(logits_disc: Tensor, domain_ids) -> Tensor:
    return ad.softmax_cross_entropy(logits_disc, domain_ids)


@dataclass
class LossBreakdown:
    """Each term as it enters the generator objective (weighted, zero when disabled)."""

    ce_label: float
    ce_domain: float
    ce_dinv: float
    remix: float
    contrastive: float
    disc: float
    gen_total: float
    lam: float

    def recompose(self) -> float:
        return self.ce_label + self.ce_domain + self.ce_dinv + self.remix + self.contrastive - self.lam * self.disc

    def to_record(self, step: int) -> dict:
        d = asdict(self)
        d.pop("lam")
        return {"step": step, **d}


def generator_total(parts: dict[str, Tensor], lam: float) -> Tensor:
    """``ce_label + ce_domain + ce_dinv + remix + contrastive - lam * disc``.

    ``parts`` must hold all six terms, already weighted and gated.
    """
    for name, t in parts.items():
        if not math.isfinite(t.item()):
            raise DivergenceError(f"loss term {name} is not finite", term=name)
    total = ad.add_scalars([parts[k] for k in ("ce_label", "ce_domain", "ce_dinv", "remix", "contrastive")])
    return ad.sub(total, ad.scale(parts["disc"], lam))


def generator_objective(art: ForwardArtifacts, config: AdrmxConfig) -> tuple[Tensor, LossBreakdown]:
    """Assemble every generator-side term from a forward pass."""
    y, dom = art.labels, art.domains
    parts = {
        "ce_label": ad.scale(cross_entropy(art.logits_label, y), config.w_ce_label),
        "ce_domain": ad.scale(cross_entropy(art.logits_domain, dom), config.w_ce_domain),
        "ce_dinv": ad.scale(cross_entropy(art.logits_dinv, y), config.w_ce_dinv),
    }
    if config.use_remix:
        parts["remix"] = remix_loss(art.logits_remix, y[art.remix_pairs[:, 0]])
    else:
        parts["remix"] = ad.constant(0.0)
    if config.use_contrastive:
        terms = []
        if config.contrastive_on in ("label", "both"):
            terms.append(supcon_loss(ad.l2_normalize(art.x_label), y, config.temperature))
        if config.contrastive_on in ("dinv", "both"):
            terms.append(supcon_loss(ad.l2_normalize(art.x_dinv), y, config.temperature))
        parts["contrastive"] = ad.add_scalars(terms)
    else:
        parts["contrastive"] = ad.constant(0.0)
    parts["disc"] = discriminator_loss(art.logits_disc, dom)
    total = generator_total(parts, config.lam)
    vals = {k: v.item() for k, v in parts.items()}
    return total, LossBreakdown(gen_total=total.item(), lam=config.lam, **vals)
