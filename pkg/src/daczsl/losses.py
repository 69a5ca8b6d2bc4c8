"""The three loss terms and their weighted total.

The disentanglement loss pushes local embeddings orthogonal to the global
one; the adversarial loss trains the global net (through gradient reversal)
against domain and task discriminators; the contrastive loss aligns fused
visual embeddings with the class text prototypes. No real/fake samples are
involved anywhere: the discriminators only classify domains and tasks.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import LabeledExample
from .model import DinModel
from .optim import ConfigError


@dataclass
class LossWeights:
    """Scalars controlling the loss mix; tau is the contrastive temperature."""

    lambda1: float = 0.1     # disentanglement
    lambda2: float = 0.1     # adversarial (generator side)
    lambda3: float = 1.0     # contrastive
    alpha: float = 1.0       # task-discriminator cross-entropy
    beta: float = 1.0        # domain-discriminator cross-entropy
    tau: float = 0.07
    lambda_grl: float = 1.0

    def validate(self) -> None:
        if self.tau <= 0:
            raise ConfigError("tau must be > 0")
        for name in ("lambda1", "lambda2", "lambda3", "alpha", "beta", "lambda_grl"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")


@dataclass
class Batch:
    """Dense arrays for one mini-batch."""

    x: np.ndarray
    y: np.ndarray
    d: np.ndarray
    t: np.ndarray

    @classmethod
    def from_examples(cls, examples: Sequence[LabeledExample]) -> "Batch":
        if not examples:
            raise ValueError("cannot build a batch from zero examples")
        return cls(
            x=np.stack([ex.x for ex in examples]),
            y=np.array([ex.y for ex in examples], dtype=np.int64),
            d=np.array([ex.d for ex in examples], dtype=np.int64),
            t=np.array([ex.t for ex in examples], dtype=np.int64),
        )

    def __len__(self) -> int:
        return self.x.shape[0]


def _zero() -> Tensor:
    return Tensor(0.0)


def disen_loss(z_locals: Sequence[Tensor], z_g: Tensor) -> Tensor:
    """Sum over local nets of squared inner products with the global embedding.

    For batched 2-D inputs the per-example sums are averaged over the batch.
    Zero exactly when every local embedding is orthogonal to the global one.
    """
    total: Optional[Tensor] = None
    for z_l in z_locals:
        if z_g.ndim == 1:
            inner = ad.dot(z_l, z_g)
            term = ad.mul(inner, inner)
        else:
            inner = ad.rows_dot(z_l, z_g)
            term = ad.mean_all(ad.mul(inner, inner))
        total = term if total is None else ad.add(total, term)
    return total if total is not None else _zero()


def contrastive_loss(batch_z: Tensor, batch_targets: Sequence[int],
                     text_prototypes, tau: float,
                     buffer_classes: Sequence[int] = ()) -> Tensor:
    """Temperature-scaled cosine contrastive loss against class prototypes.

    The denominator pool is the distinct classes of the batch plus any
    supplied buffer classes. ``text_prototypes`` is either a mapping from
    class to 1-D prototype tensor, or a pair (classes, rows) with one row
    per class.

    Args:
        batch_z: (N, e) fused embeddings, or a single (e,) vector.
        batch_targets: true class of each embedding.
        tau: temperature, > 0.
    """
    if tau <= 0:
        raise ConfigError(f"tau must be > 0, got {tau}")
    targets = [int(y) for y in np.atleast_1d(np.asarray(batch_targets))]
    if not targets:
        raise ValueError("contrastive_loss needs at least one example")
    pool = sorted(set(targets) | {int(c) for c in buffer_classes})

    if isinstance(text_prototypes, Mapping):
        missing = [c for c in pool if c not in text_prototypes]
        if missing:
            raise KeyError(f"missing text prototype for classes {missing}")
        rows = ad.vstack([text_prototypes[c] for c in pool])
    else:
        proto_classes, proto_rows = text_prototypes
        position = {int(c): i for i, c in enumerate(proto_classes)}
        missing = [c for c in pool if c not in position]
        if missing:
            raise KeyError(f"missing text prototype for classes {missing}")
        rows = ad.take_rows(proto_rows, [position[c] for c in pool])

    z = batch_z if batch_z.ndim == 2 else ad.vstack([batch_z])
    sims = ad.matmul(ad.l2_normalize(z), ad.transpose(ad.l2_normalize(rows)))
    logits = ad.scale(sims, 1.0 / tau)
    target_idx = [pool.index(y) for y in targets]
    return ad.mean_all(ad.softmax_cross_entropy_rows(logits, target_idx))


def _adv_cross_entropies(z_g: Tensor, batch: Batch, model: DinModel,
                         weights: LossWeights, reverse: bool) -> Tensor:
    n = len(batch)
    total: Optional[Tensor] = None
    if model.task_disc is not None and weights.alpha > 0:
        lam = weights.lambda_grl if reverse else 0.0
        logits = (model.discriminate(z_g, "task", lam) if reverse
                  else model.task_disc.forward(z_g))
        _check_labels(batch.t, model.config.num_tasks, "task")
        ce = ad.mean_all(ad.softmax_cross_entropy_rows(logits, batch.t.tolist()))
        term = ad.scale(ce, weights.alpha)
        total = term if total is None else ad.add(total, term)
    if model.domain_disc is not None and weights.beta > 0:
        logits = (model.discriminate(z_g, "domain", weights.lambda_grl) if reverse
                  else model.domain_disc.forward(z_g))
        _check_labels(batch.d, model.config.num_domains, "domain")
        ce = ad.mean_all(ad.softmax_cross_entropy_rows(logits, batch.d.tolist()))
        term = ad.scale(ce, weights.beta)
        total = term if total is None else ad.add(total, term)
    return total if total is not None else _zero()


def _check_labels(labels: np.ndarray, bound: int, kind: str) -> None:
    if labels.size and (labels.min() < 0 or labels.max() >= bound):
        raise IndexError(f"{kind} label outside [0, {bound}) in batch")


def adv_loss_generator(batch: Batch, model: DinModel, weights: LossWeights) -> Tensor:
    """Adversarial cross-entropies on the gradient-reversal path.

    Minimizing this pushes the global net toward features the discriminators
    cannot separate (the reversal realizes the min-max objective).
    """
    z_g = model.encode_global(Tensor(batch.x))
    return _adv_cross_entropies(z_g, batch, model, weights, reverse=True)


def adv_loss_discriminator(batch: Batch, model: DinModel,
                           weights: LossWeights) -> Tensor:
    """Same cross-entropies on detached global features; no gradient reaches G."""
    z_g = ad.detach(model.encode_global(Tensor(batch.x)))
    return _adv_cross_entropies(z_g, batch, model, weights, reverse=False)


def total_loss(batch: Batch, model: DinModel, weights: LossWeights,
               current_task: int, buffer_classes: Sequence[int] = (),
               use_disen: bool = True) -> tuple[Tensor, dict[str, float]]:
    """Weighted training loss lambda1*disen + lambda2*adv + lambda3*cont.

    Returns the scalar loss tensor and the unweighted per-term values for
    logging. Terms whose weight is zero (or whose components are absent,
    e.g. no local nets yet) are skipped and reported as 0.
    """
    weights.validate()
    x = Tensor(batch.x)
    z_g = model.encode_global(x)

    z_locals: list[Tensor] = []
    if model.config.with_local and model.local_nets:
        instantiated = sorted(model.local_nets)
        by_task = {s: model.encode_local(x, s) for s in instantiated}
        z_locals = [by_task[s] for s in instantiated]
        z = model.fuse(by_task[current_task], z_g)
    else:
        z = ad.l2_normalize(z_g)

    total: Optional[Tensor] = None
    parts = {"disen": 0.0, "adv": 0.0, "cont": 0.0}

    if use_disen and weights.lambda1 > 0 and z_locals:
        term = disen_loss(z_locals, z_g)
        parts["disen"] = term.item()
        total = ad.scale(term, weights.lambda1)

    if weights.lambda2 > 0:
        term = _adv_cross_entropies(z_g, batch, model, weights, reverse=True)
        parts["adv"] = term.item()
        weighted = ad.scale(term, weights.lambda2)
        total = weighted if total is None else ad.add(total, weighted)

    if weights.lambda3 > 0:
        pool = sorted(set(batch.y.tolist()) | {int(c) for c in buffer_classes})
        protos = model.text_prototypes(pool)
        term = contrastive_loss(z, batch.y, (pool, protos), weights.tau,
                                buffer_classes=buffer_classes)
        parts["cont"] = term.item()
        weighted = ad.scale(term, weights.lambda3)
        total = weighted if total is None else ad.add(total, weighted)

    if total is None:
        total = _zero()
    parts["total"] = total.item()
    return total, parts
