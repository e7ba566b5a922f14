"""Behaviour cloning of the ProtoX head, prototype projection and merging.

Objective::

    CE + lambda_sep * Sep + lambda_clst * Clst + lambda_rep * Rep + lambda_iso * Iso

Only A, the prototypes and W are optimised; the encoder is frozen and its
latents are computed once up front.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigurationError, DataError, NumericError, StateError
from .model import ProtoXModel, iso_penalty, l2_norm

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ObjectiveWeights:
    lambda_sep: float = 0.1
    lambda_clst: float = 0.1
    lambda_rep: float = 0.01
    lambda_iso: float = 1.0

    def validate(self) -> None:
        for name, v in vars(self).items():
            if v < 0:
                raise ConfigurationError(f"{name} must be >= 0, got {v}")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 64
    learning_rate: float = 1e-3
    projection_period: int = 25
    seed: int = 0
    initial_K: int = 25
    rep_sample_size: int = 4096

    def validate(self) -> None:
        if self.epochs < 1 or self.projection_period < 1 or self.initial_K < 1 or self.batch_size < 1:
            raise ConfigurationError("epochs, projection_period, initial_K and batch_size must all be >= 1")


def _labels(labels, model: ProtoXModel) -> torch.Tensor:
    y = torch.as_tensor(np.asarray(labels), dtype=torch.int64)
    if y.numel() and (y.min() < 0 or y.max() >= len(model.action_set)):
        raise DataError(f"action label outside the model's action set {model.action_set}")
    return y


def _check_protos(model: ProtoXModel, need_two: bool = False) -> None:
    counts = np.bincount(model.proto_actions, minlength=len(model.action_set))
    if need_two and len(model.action_set) < 2:
        raise ConfigurationError("separation needs at least two actions")
    if (counts == 0).any():
        missing = [model.action_set[a] for a in np.flatnonzero(counts == 0)]
        raise ConfigurationError(f"actions without prototypes: {missing}")


def ce_term(batch, model: ProtoXModel, dists: torch.Tensor | None = None) -> torch.Tensor:
    latents, labels = batch
    if len(labels) == 0:
        raise DataError("empty batch")
    y = _labels(labels, model)
    if dists is None:
        dists = model.distances(latents)
    logits = torch.exp(-model.beta * dists) @ model.W
    return F.cross_entropy(logits, y)


def sep_term(batch, model: ProtoXModel, dists: torch.Tensor | None = None) -> torch.Tensor:
    """-(1/n) sum_i min over wrong-action prototypes of the distance. Always <= 0."""
    _check_protos(model, need_two=True)
    latents, labels = batch
    y = _labels(labels, model)
    if dists is None:
        dists = model.distances(latents)
    tags = torch.from_numpy(model.proto_actions)
    wrong = tags.unsqueeze(0) != y.unsqueeze(1)
    masked = torch.where(wrong, dists, torch.full_like(dists, math.inf))
    return -masked.min(dim=1).values.mean()


def clst_term(batch, model: ProtoXModel, dists: torch.Tensor | None = None) -> torch.Tensor:
    """(1/n) sum_i min over same-action prototypes of the distance."""
    _check_protos(model)
    latents, labels = batch
    y = _labels(labels, model)
    if dists is None:
        dists = model.distances(latents)
    tags = torch.from_numpy(model.proto_actions)
    same = tags.unsqueeze(0) == y.unsqueeze(1)
    masked = torch.where(same, dists, torch.full_like(dists, math.inf))
    return masked.min(dim=1).values.mean()


def rep_term(sample_latents, model: ProtoXModel) -> torch.Tensor:
    """Sum over prototypes of the squared distance to the nearest sampled encoding.

    The nearest encoding is located without gradient tracking, then the exact
    squared distance to it is recomputed with gradients, so memory stays
    O(P * D) regardless of the sample size.
    """
    sample = torch.as_tensor(np.asarray(sample_latents), dtype=torch.float64).reshape(len(sample_latents), -1)
    if not len(sample):
        raise DataError("rep_term needs a nonempty sample")
    with torch.no_grad():
        z = model.embed(sample)
        nearest = torch.cdist(model.prototypes.detach(), z).argmin(dim=1)
    chosen = model.embed(sample[nearest])
    return ((chosen - model.prototypes) ** 2).sum()


def total_objective(batch, model: ProtoXModel, weights: ObjectiveWeights, rep_sample=None, parts: bool = False):
    latents, _ = batch
    dists = model.distances(latents)
    terms = {
        "ce": ce_term(batch, model, dists),
        "sep": sep_term(batch, model, dists),
        "clst": clst_term(batch, model, dists),
        "rep": rep_term(latents if rep_sample is None else rep_sample, model),
        "iso": iso_penalty(model.A),
    }
    total = (
        terms["ce"]
        + weights.lambda_sep * terms["sep"]
        + weights.lambda_clst * terms["clst"]
        + weights.lambda_rep * terms["rep"]
        + weights.lambda_iso * terms["iso"]
    )
    return (total, terms) if parts else total


@dataclass
class ProjectionReport:
    epoch: int
    moved: int
    max_shift: float
    unique_sources: int


@torch.no_grad()
def project_prototypes(
    model: ProtoXModel,
    latents: np.ndarray,
    index: np.ndarray,
    epoch: int = -1,
    chunk: int = 2048,
) -> ProjectionReport:
    """Snap every prototype onto its nearest training encoding A f(x).

    ``latents`` are the frozen-encoder latents of the training rows and
    ``index`` their (episode_id, t) pairs. Ties go to the lowest row.
    """
    latents = np.asarray(latents, dtype=np.float64).reshape(len(latents), -1)
    if not len(latents):
        raise DataError("projection needs a nonempty training set")
    # identical latents give identical distances; keep their first row only
    uniq, first = np.unique(latents, axis=0, return_index=True)
    order = np.argsort(first, kind="stable")
    uniq, first = uniq[order], first[order]
    protos = model.prototypes.detach()
    best_d = torch.full((model.n_prototypes,), math.inf, dtype=torch.float64)
    best_row = torch.zeros(model.n_prototypes, dtype=torch.int64)
    for s in range(0, len(uniq), chunk):
        z = model.embed(uniq[s : s + chunk])
        d = l2_norm(protos.unsqueeze(1) - z.unsqueeze(0))  # (P, chunk)
        dmin, arg = d.min(dim=1)  # first minimum within chunk
        better = dmin < best_d
        best_d = torch.where(better, dmin, best_d)
        best_row = torch.where(better, torch.from_numpy(first[s : s + chunk])[arg], best_row)
    rows = best_row.numpy()
    new = model.embed(latents[rows])
    shift = l2_norm(new - protos)
    model.prototypes.copy_(new)
    model.source_index = np.asarray(index, dtype=np.int64)[rows].copy()
    return ProjectionReport(
        epoch=epoch,
        moved=int((shift > 0).sum()),
        max_shift=float(shift.max()),
        unique_sources=len({tuple(r) for r in model.source_index.tolist()}),
    )


@dataclass
class MergeReport:
    before: int
    after: int
    groups: list[list[int]]


@torch.no_grad()
def merge_prototypes(model: ProtoXModel) -> tuple[ProtoXModel, MergeReport]:
    """Collapse prototypes sharing a source state; head rows of each group are summed."""
    if not model.is_projected:
        raise StateError("merge_prototypes requires a projected model (run project_prototypes first)")
    groups: dict[tuple[int, int], list[int]] = {}
    for i, src in enumerate(model.source_index.tolist()):
        groups.setdefault(tuple(src), []).append(i)
    members = list(groups.values())
    keep = [g[0] for g in members]
    new = model.copy_structure(model.proto_actions[keep])
    new.A.copy_(model.A)
    new.prototypes.copy_(model.prototypes[keep])
    new.W.copy_(torch.stack([model.W[g].sum(dim=0) for g in members]))
    new.source_index = model.source_index[keep].copy()
    return new, MergeReport(before=model.n_prototypes, after=len(keep), groups=members)


def train_bc(
    model: ProtoXModel,
    latents: np.ndarray,
    actions: np.ndarray,
    index: np.ndarray,
    weights: ObjectiveWeights,
    config: TrainConfig,
    on_epoch: Callable[[dict], None] | None = None,
) -> tuple[ProtoXModel, dict]:
    """Minibatch Adam on the composite objective.

    ``latents`` are frozen-encoder latents for every training row. Projection
    runs every ``projection_period`` epochs and once after the last epoch.
    Returns the trained (projected, unmerged) model and a history dict.
    """
    weights.validate()
    config.validate()
    if model.encoder is not None and not model.encoder.frozen:
        raise StateError("encoder must be frozen before behaviour cloning")
    latents = np.asarray(latents, dtype=np.float64).reshape(len(latents), -1)
    actions = np.asarray(actions, dtype=np.int64)
    if not len(latents):
        raise DataError("empty training set")
    _labels(actions, model)

    rng = np.random.default_rng(config.seed)
    params = [model.A, model.prototypes, model.W]
    opt = torch.optim.Adam(params, lr=config.learning_rate)
    z_all = torch.from_numpy(latents)
    y_all = torch.from_numpy(actions)
    uniq_latents = np.unique(latents, axis=0)
    history = {"epochs": [], "projections": []}

    for epoch in range(config.epochs):
        # duplicates never change a minimum, so the Rep sample is drawn from unique encodings
        if len(uniq_latents) > config.rep_sample_size:
            rep_sample = torch.from_numpy(
                uniq_latents[rng.choice(len(uniq_latents), config.rep_sample_size, replace=False)]
            )
        else:
            rep_sample = torch.from_numpy(uniq_latents)
        perm = rng.permutation(len(latents))
        sums = {k: 0.0 for k in ("total", "ce", "sep", "clst", "rep", "iso")}
        n_batches = 0
        for b in range(0, len(perm), config.batch_size):
            rows = torch.from_numpy(perm[b : b + config.batch_size])
            total, terms = total_objective((z_all[rows], y_all[rows]), model, weights, rep_sample, parts=True)
            if not torch.isfinite(total):
                raise NumericError(
                    f"non-finite objective at epoch {epoch}, batch {n_batches}: "
                    + ", ".join(f"{k}={v.item():.4g}" for k, v in terms.items())
                )
            opt.zero_grad()
            total.backward()
            opt.step()
            sums["total"] += total.item()
            for k, v in terms.items():
                sums[k] += v.item()
            n_batches += 1
        row = {k: v / n_batches for k, v in sums.items()}
        row["epoch"] = epoch
        history["epochs"].append(row)
        log.info("train epoch %d: %s", epoch, row)
        if on_epoch:
            on_epoch(row)
        if (epoch + 1) % config.projection_period == 0 or epoch + 1 == config.epochs:
            report = project_prototypes(model, latents, index, epoch=epoch)
            history["projections"].append(vars(report))
    return model, history
