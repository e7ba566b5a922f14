"""ProtoX head: near-isometry layer, action-tagged prototypes and a linear evidence layer.

Everything downstream of the frozen encoder operates on flattened latents of
dimension D = C'*H'*W' and runs in float64.
"""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

from . import container
from .errors import ConfigurationError, FormatError, ShapeError
from .pretrain import ConvVAE, Encoder, EncoderConfig

MODEL_MAGIC = b"PTXM"
MODEL_VERSION = 1
DEFAULT_BETA = 0.05


class _ExactNorm(torch.autograd.Function):
    """Euclidean norm over the last axis with subgradient 0 at the origin."""

    @staticmethod
    def forward(ctx, diff):
        norm = diff.pow(2).sum(-1).sqrt()
        ctx.save_for_backward(diff, norm)
        return norm

    @staticmethod
    def backward(ctx, grad):
        diff, norm = ctx.saved_tensors
        scale = torch.where(norm > 0, grad / torch.where(norm > 0, norm, torch.ones_like(norm)), torch.zeros_like(norm))
        return diff * scale.unsqueeze(-1)


def l2_norm(diff: torch.Tensor) -> torch.Tensor:
    return _ExactNorm.apply(diff)


def pairwise_distances(z: torch.Tensor, protos: torch.Tensor) -> torch.Tensor:
    """Exact ||z_i - p_j||_2 for z (B, D), protos (P, D) -> (B, P)."""
    if z.shape[-1] != protos.shape[-1]:
        raise ShapeError(f"latent dim {z.shape[-1]} != prototype dim {protos.shape[-1]}")
    return l2_norm(z.unsqueeze(-2) - protos.unsqueeze(0))


def apply_isometry(A: torch.Tensor, latent: torch.Tensor) -> torch.Tensor:
    """A @ flatten(latent). Accepts a single block (C', H', W'), a vector (D,), or a batch."""
    d = A.shape[1]
    if latent.shape[-1] != d:
        if latent.dim() >= 3 and int(np.prod(latent.shape[-3:])) == d:
            latent = latent.flatten(-3)
        else:
            raise ShapeError(f"latent of shape {tuple(latent.shape)} does not match isometry dim {d}")
    return latent @ A.T


def iso_penalty(A: torch.Tensor) -> torch.Tensor:
    """Squared Frobenius norm of A^T A - I."""
    if A.dim() != 2 or A.shape[0] != A.shape[1]:
        raise ShapeError(f"isometry matrix must be square, got {tuple(A.shape)}")
    eye = torch.eye(A.shape[1], dtype=A.dtype)
    return ((A.T @ A - eye) ** 2).sum()


def similarity(z: torch.Tensor, p: torch.Tensor, beta: float = DEFAULT_BETA) -> torch.Tensor:
    if z.shape[-1] != p.shape[-1]:
        raise ShapeError(f"dimension mismatch: {z.shape[-1]} vs {p.shape[-1]}")
    if beta <= 0:
        raise ConfigurationError("beta must be positive")
    return torch.exp(-beta * l2_norm(z - p))


def evidence(sims: torch.Tensor, W: torch.Tensor) -> torch.Tensor:
    """Evidence per action: sims (..., P) @ W (P, |A|)."""
    if sims.shape[-1] != W.shape[0]:
        raise ShapeError(f"{sims.shape[-1]} similarities but head has {W.shape[0]} rows")
    return sims @ W


class ProtoXModel(nn.Module):
    def __init__(
        self,
        latent_dim: int,
        proto_actions: Sequence[int],
        action_set: Sequence[str],
        beta: float = DEFAULT_BETA,
        encoder: Encoder | None = None,
    ):
        super().__init__()
        if beta <= 0:
            raise ConfigurationError("beta must be positive")
        proto_actions = np.asarray(proto_actions, dtype=np.int64)
        if proto_actions.size and (proto_actions.min() < 0 or proto_actions.max() >= len(action_set)):
            raise ConfigurationError("prototype action tag outside the action set")
        if encoder is not None and not encoder.frozen:
            raise ConfigurationError("ProtoX requires a frozen encoder")
        n_protos = len(proto_actions)
        self.action_set = tuple(action_set)
        self.beta = float(beta)
        self.encoder = encoder
        self.A = nn.Parameter(torch.eye(latent_dim, dtype=torch.float64))
        self.prototypes = nn.Parameter(torch.zeros(n_protos, latent_dim, dtype=torch.float64))
        self.W = nn.Parameter(torch.zeros(n_protos, len(action_set), dtype=torch.float64))
        self.proto_actions = proto_actions
        self.source_index = np.full((n_protos, 2), -1, dtype=np.int64)
        self.dataset_hash: str | None = None

    @property
    def latent_dim(self) -> int:
        return self.A.shape[0]

    @property
    def n_prototypes(self) -> int:
        return self.prototypes.shape[0]

    @property
    def is_projected(self) -> bool:
        return bool(self.n_prototypes) and bool((self.source_index >= 0).all())

    def embed(self, latents) -> torch.Tensor:
        return apply_isometry(self.A, torch.as_tensor(latents, dtype=torch.float64))

    def distances(self, latents) -> torch.Tensor:
        return pairwise_distances(self.embed(latents), self.prototypes)

    def forward(self, latents):
        """Returns (evidence (B, |A|), similarities (B, P), distances (B, P))."""
        d = self.distances(latents)
        sims = torch.exp(-self.beta * d)
        return evidence(sims, self.W), sims, d

    @torch.no_grad()
    def predict_latents(self, latents, batch_size: int = 1024) -> np.ndarray:
        latents = np.asarray(latents, dtype=np.float64).reshape(len(latents), -1)
        out = [self(latents[i : i + batch_size])[0].argmax(-1).numpy() for i in range(0, len(latents), batch_size)]
        return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)

    def encode_states(self, states: np.ndarray) -> np.ndarray:
        if self.encoder is None:
            raise ConfigurationError("model has no encoder attached")
        return self.encoder.encode_batch(states).reshape(len(states), -1)

    def predict_batch(self, states: np.ndarray) -> np.ndarray:
        return self.predict_latents(self.encode_states(states))

    def copy_structure(self, proto_actions) -> "ProtoXModel":
        new = ProtoXModel(self.latent_dim, proto_actions, self.action_set, self.beta, self.encoder)
        new.dataset_hash = self.dataset_hash
        return new

    # checkpoint I/O -------------------------------------------------------

    def save(self, path: str | Path, extra_meta: dict | None = None) -> str:
        meta = {
            "kind": "protox_model",
            "action_set": list(self.action_set),
            "beta": self.beta,
            "latent_dim": self.latent_dim,
            "dataset_hash": self.dataset_hash,
            "encoder_hash": self.encoder.parameter_hash() if self.encoder else None,
            **(extra_meta or {}),
        }
        arrays = {
            "A": self.A.detach().numpy(),
            "prototypes": self.prototypes.detach().numpy(),
            "W": self.W.detach().numpy(),
            "proto_actions": self.proto_actions,
            "source_index": self.source_index,
        }
        if self.encoder is not None:
            cfg = self.encoder.config
            meta["encoder_architecture"] = {
                "stack_depth": cfg.stack_depth,
                "frame_shape": list(cfg.frame_shape),
                "widths": list(cfg.widths),
                "latent_channels": cfg.latent_channels,
            }
            for k, v in self.encoder.net.state_dict().items():
                arrays[f"encoder/{k}"] = v.detach().numpy()
        return container.write(path, MODEL_MAGIC, MODEL_VERSION, meta, arrays)

    @classmethod
    def load(cls, path: str | Path) -> "ProtoXModel":
        meta, arrays = container.read(path, MODEL_MAGIC, MODEL_VERSION)
        try:
            encoder = None
            if meta.get("encoder_architecture"):
                arch = meta["encoder_architecture"]
                cfg = EncoderConfig(
                    stack_depth=int(arch["stack_depth"]),
                    frame_shape=tuple(arch["frame_shape"]),
                    widths=tuple(arch["widths"]),
                    latent_channels=int(arch["latent_channels"]),
                )
                net = ConvVAE(cfg)
                net.load_state_dict(
                    {k[len("encoder/") :]: torch.from_numpy(v) for k, v in arrays.items() if k.startswith("encoder/")}
                )
                encoder = Encoder(cfg, net, frozen=True)
                if meta.get("encoder_hash") and encoder.parameter_hash() != meta["encoder_hash"]:
                    raise FormatError("embedded encoder does not match its recorded hash")
            model = cls(int(meta["latent_dim"]), arrays["proto_actions"], meta["action_set"], meta["beta"], encoder)
            with torch.no_grad():
                model.A.copy_(torch.from_numpy(arrays["A"]))
                model.prototypes.copy_(torch.from_numpy(arrays["prototypes"]))
                model.W.copy_(torch.from_numpy(arrays["W"]))
            model.source_index = arrays["source_index"].astype(np.int64)
            model.dataset_hash = meta.get("dataset_hash")
        except (KeyError, RuntimeError, TypeError) as exc:
            raise FormatError(f"inconsistent model checkpoint: {exc}") from exc
        return model


def init_model(
    latents: np.ndarray,
    actions: np.ndarray,
    action_set: Sequence[str],
    K: int,
    seed: int,
    beta: float = DEFAULT_BETA,
    encoder: Encoder | None = None,
) -> ProtoXModel:
    """K prototypes per action, each placed on the encoding of a random training
    state with that expert action (any state if the action never occurs).
    A starts at the identity and W at zero."""
    if K < 1:
        raise ConfigurationError("initial_K must be >= 1")
    latents = np.asarray(latents, dtype=np.float64).reshape(len(latents), -1)
    rng = np.random.default_rng(seed)
    tags = np.repeat(np.arange(len(action_set)), K)
    model = ProtoXModel(latents.shape[1], tags, action_set, beta, encoder)
    rows = []
    for a in range(len(action_set)):
        pool = np.flatnonzero(actions == a)
        if not len(pool):
            pool = np.arange(len(latents))
        rows.extend(rng.choice(pool, size=K, replace=True).tolist())
    with torch.no_grad():
        model.prototypes.copy_(torch.from_numpy(latents[rows]))
    return model


def predict(model: ProtoXModel, state):
    """Returns (action id, evidence vector, per-prototype similarities) for one state."""
    frames = state.frames if hasattr(state, "frames") else np.asarray(state)
    z = model.encode_states(frames[None])
    with torch.no_grad():
        ev, sims, _ = model(z)
    ev, sims = ev[0].numpy(), sims[0].numpy()
    return int(np.argmax(ev)), ev, sims
