"""Self-supervised encoder pre-training with a time-contrastive quadruplet loss.

A siamese convolutional VAE is trained on quadruplets mined from expert
trajectories:

* anchor         s_t
* positive       same episode, within ``delta_time`` steps, same expert action
* near negative  same episode, within ``delta_time`` steps, different action
* far negative   outside the temporal window (or from another episode)

The contrastive part acts on the posterior mean; sampling is only used on the
reconstruction path. After training the encoder is frozen and ``encode``
returns the posterior mean block of shape (C', H', W').
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
import torch
from torch import nn

from . import container
from .demonstrations import DemonstrationDataset
from .errors import ConfigurationError, FormatError, NumericError, ShapeError

log = logging.getLogger(__name__)

ENCODER_MAGIC = b"PTXE"
ENCODER_VERSION = 1


@dataclass(frozen=True)
class MinerConfig:
    delta_time: int = 10
    m1: float = 1.0
    m2: float = 1.0
    max_resamples: int = 20

    def validate(self) -> None:
        if self.delta_time < 1:
            raise ConfigurationError("delta_time must be >= 1")
        if self.m1 < 0 or self.m2 < 0:
            raise ConfigurationError("margins must be non-negative")
        if self.max_resamples < 1:
            raise ConfigurationError("max_resamples must be >= 1")


@dataclass(frozen=True)
class QuadrupletSpec:
    anchor: tuple[int, int]
    positive: tuple[int, int]
    near_negative: tuple[int, int]
    far_negative: tuple[int, int]


@dataclass(frozen=True)
class EncoderConfig:
    stack_depth: int = 4
    frame_shape: tuple[int, int, int] = (64, 64, 3)
    widths: tuple[int, ...] = (16, 32, 32)
    latent_channels: int = 16

    @property
    def in_channels(self) -> int:
        return self.stack_depth * self.frame_shape[2]

    @property
    def latent_shape(self) -> tuple[int, int, int]:
        h, w, _ = self.frame_shape
        down = 2 ** (len(self.widths) + 1)
        return (self.latent_channels, h // down, w // down)

    def validate(self) -> None:
        h, w, _ = self.frame_shape
        down = 2 ** (len(self.widths) + 1)
        if h % down or w % down:
            raise ConfigurationError(f"frame shape {self.frame_shape} not divisible by {down}")


@dataclass(frozen=True)
class PretrainConfig:
    epochs: int = 6
    batch_size: int = 128
    learning_rate: float = 1e-3
    kl_weight: float = 1.0
    anchors_per_epoch: int | None = None
    seed: int = 0


def mine_quadruplet(
    dataset: DemonstrationDataset,
    anchor: tuple[int, int],
    config: MinerConfig,
    rng: np.random.Generator,
) -> QuadrupletSpec | None:
    ep, t = int(anchor[0]), int(anchor[1])
    actions = dataset.trajectory(ep).actions
    T = len(actions)
    lo, hi = max(0, t - config.delta_time), min(T, t + config.delta_time + 1)
    window = np.arange(lo, hi)
    window = window[window != t]
    same = window[actions[window] == actions[t]]
    diff = window[actions[window] != actions[t]]
    if not len(same) or not len(diff):
        return None
    pos = int(same[rng.integers(len(same))])
    neg = int(diff[rng.integers(len(diff))])

    outside = np.concatenate([np.arange(0, lo), np.arange(hi, T)])
    if len(outside):
        far = (ep, int(outside[rng.integers(len(outside))]))
    else:
        others = [e for e in dataset.episode_ids if e != ep]
        if not others:
            return None
        far = None
        for _ in range(config.max_resamples):
            other = others[int(rng.integers(len(others)))]
            n = len(dataset.trajectory(other))
            if n:
                far = (other, int(rng.integers(n)))
                break
        if far is None:
            return None
    return QuadrupletSpec((ep, t), (ep, pos), (ep, neg), far)


def quadruplet_loss(z_a, z_p, z_n, z_nn, m1: float, m2: float) -> torch.Tensor:
    """Two-hinge quadruplet loss on squared Euclidean distances.

    Accepts single vectors (D,) or batches (B, D); batches are averaged.
    """
    shapes = {tuple(z.shape) for z in (z_a, z_p, z_n, z_nn)}
    if len(shapes) != 1:
        raise ShapeError(f"quadruplet embeddings disagree in shape: {sorted(shapes)}")
    d_ap = ((z_a - z_p) ** 2).sum(-1)
    d_an = ((z_a - z_n) ** 2).sum(-1)
    d_nn = ((z_n - z_nn) ** 2).sum(-1)
    loss = torch.clamp(d_ap - d_an + m1, min=0) + torch.clamp(d_ap - d_nn + m2, min=0)
    return loss.mean()


def gaussian_kl(mu: torch.Tensor, logvar: torch.Tensor) -> torch.Tensor:
    """KL(N(mu, exp(logvar)) || N(0, I)), averaged over latent units and batch."""
    return (0.5 * (mu**2 + logvar.exp() - 1.0 - logvar)).mean()


def vae_loss(state, reconstruction, posterior, kl_weight: float = 1.0, weights=None):
    """Pixel MSE plus weighted Gaussian KL. Returns (total, recon, kl).

    ``posterior`` is a (mean, log-variance) pair. ``weights`` optionally
    gives a per-sample weight (used when duplicates are folded together).
    """
    mu, logvar = posterior
    if reconstruction.shape != state.shape:
        raise ShapeError(f"reconstruction shape {tuple(reconstruction.shape)} != state {tuple(state.shape)}")
    if not (torch.isfinite(mu).all() and torch.isfinite(logvar).all()):
        raise NumericError("non-finite posterior parameters")
    if weights is None:
        recon = ((reconstruction - state) ** 2).mean()
        kl = gaussian_kl(mu, logvar)
    else:
        w = weights / weights.sum()
        recon = (((reconstruction - state) ** 2).flatten(1).mean(1) * w).sum()
        kl = ((0.5 * (mu**2 + logvar.exp() - 1.0 - logvar)).flatten(1).mean(1) * w).sum()
    return recon + kl_weight * kl, recon, kl


class ConvVAE(nn.Module):
    def __init__(self, config: EncoderConfig):
        super().__init__()
        layers, c = [], config.in_channels
        for w in config.widths:
            layers += [nn.Conv2d(c, w, 4, stride=2, padding=1), nn.ReLU()]
            c = w
        self.trunk = nn.Sequential(*layers)
        self.mu = nn.Conv2d(c, config.latent_channels, 4, stride=2, padding=1)
        self.logvar = nn.Conv2d(c, config.latent_channels, 4, stride=2, padding=1)
        dec, c = [], config.latent_channels
        for w in reversed(config.widths):
            dec += [nn.ConvTranspose2d(c, w, 4, stride=2, padding=1), nn.ReLU()]
            c = w
        dec += [nn.ConvTranspose2d(c, config.in_channels, 4, stride=2, padding=1), nn.Sigmoid()]
        self.decoder = nn.Sequential(*dec)

    def posterior(self, x):
        h = self.trunk(x)
        return self.mu(h), self.logvar(h).clamp(-10.0, 10.0)

    def forward(self, x, generator=None):
        mu, logvar = self.posterior(x)
        eps = torch.randn(mu.shape, generator=generator, dtype=mu.dtype)
        z = mu + eps * (0.5 * logvar).exp()
        return self.decoder(z), mu, logvar


def to_tensor(states: np.ndarray) -> torch.Tensor:
    """uint8 (B, C, H, W, 3) -> float32 (B, 3C, H, W) scaled to [0, 1]."""
    b, c, h, w, ch = states.shape
    x = torch.from_numpy(np.ascontiguousarray(states)).permute(0, 1, 4, 2, 3).reshape(b, c * ch, h, w)
    return x.float() / 255.0


class Encoder:
    """Frozen state encoder f: state -> latent block (C', H', W')."""

    def __init__(self, config: EncoderConfig, net: ConvVAE | None = None, frozen: bool = False):
        config.validate()
        self.config = config
        self.net = net if net is not None else ConvVAE(config)
        self.frozen = False
        if frozen:
            self.freeze()

    @property
    def latent_shape(self) -> tuple[int, int, int]:
        return self.config.latent_shape

    @property
    def latent_dim(self) -> int:
        return int(np.prod(self.latent_shape))

    def freeze(self) -> "Encoder":
        self.net.eval()
        for p in self.net.parameters():
            p.requires_grad_(False)
        self.frozen = True
        return self

    def _check(self, states: np.ndarray) -> None:
        want = (self.config.stack_depth, *self.config.frame_shape)
        if states.ndim != 5 or tuple(states.shape[1:]) != want:
            raise ShapeError(f"expected states of shape (B, {', '.join(map(str, want))}), got {states.shape}")

    @torch.no_grad()
    def encode_batch(self, states: np.ndarray, batch_size: int = 256) -> np.ndarray:
        """Posterior means for uint8 states (B, C, H, W, 3) as float64 (B, C', H', W')."""
        self._check(states)
        was_training = self.net.training
        self.net.eval()
        out = [
            self.net.posterior(to_tensor(states[i : i + batch_size]))[0].double().numpy()
            for i in range(0, len(states), batch_size)
        ]
        self.net.train(was_training)
        if not out:
            return np.zeros((0, *self.latent_shape))
        return np.concatenate(out)

    def parameter_hash(self) -> str:
        h = hashlib.sha256()
        for name, t in sorted(self.net.state_dict().items()):
            h.update(name.encode())
            h.update(t.detach().cpu().numpy().tobytes())
        return h.hexdigest()

    def save(self, path: str | Path, extra_meta: dict | None = None) -> str:
        meta = {
            "kind": "encoder",
            "architecture": {
                "stack_depth": self.config.stack_depth,
                "frame_shape": list(self.config.frame_shape),
                "widths": list(self.config.widths),
                "latent_channels": self.config.latent_channels,
            },
            "latent_shape": list(self.latent_shape),
            "frozen": self.frozen,
            "parameter_hash": self.parameter_hash(),
            **(extra_meta or {}),
        }
        arrays = {k: v.detach().cpu().numpy() for k, v in self.net.state_dict().items()}
        return container.write(path, ENCODER_MAGIC, ENCODER_VERSION, meta, arrays)

    @classmethod
    def load(cls, path: str | Path) -> "Encoder":
        meta, arrays = container.read(path, ENCODER_MAGIC, ENCODER_VERSION)
        try:
            arch = meta["architecture"]
            config = EncoderConfig(
                stack_depth=int(arch["stack_depth"]),
                frame_shape=tuple(arch["frame_shape"]),
                widths=tuple(arch["widths"]),
                latent_channels=int(arch["latent_channels"]),
            )
            enc = cls(config)
            enc.net.load_state_dict({k: torch.from_numpy(v) for k, v in arrays.items()})
        except (KeyError, RuntimeError) as exc:
            raise FormatError(f"inconsistent encoder checkpoint: {exc}") from exc
        if meta.get("frozen"):
            enc.freeze()
        return enc


def encode(encoder: Encoder, state) -> np.ndarray:
    """Encode a single State (or (C, H, W, 3) array) to its latent block."""
    frames = state.frames if hasattr(state, "frames") else np.asarray(state)
    return encoder.encode_batch(frames[None])[0]


def encode_dataset(encoder: Encoder, dataset: DemonstrationDataset) -> np.ndarray:
    """Flattened latents for every dataset row, shape (N, D) float64.

    Bit-identical states are encoded once and broadcast back.
    """
    first, inverse = dataset.unique_states()
    lat = encoder.encode_batch(dataset.states(first)).reshape(len(first), -1)
    return lat[inverse]


def _seeded_init(config: EncoderConfig, seed: int) -> ConvVAE:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return ConvVAE(config)


def pretrain_encoder(
    dataset: DemonstrationDataset,
    encoder_config: EncoderConfig,
    miner_config: MinerConfig,
    train_config: PretrainConfig,
    on_epoch: Callable[[dict], None] | None = None,
) -> tuple[Encoder, list[dict]]:
    """Train the siamese VAE and return (frozen encoder, per-epoch telemetry)."""
    miner_config.validate()
    if len(np.unique(dataset.actions)) < 2:
        raise ConfigurationError("pre-training needs at least two distinct expert actions (no near-negatives)")
    if encoder_config.stack_depth != dataset.stack_depth or tuple(encoder_config.frame_shape) != dataset.frame_shape:
        raise ConfigurationError("encoder input shape does not match the dataset")

    rng = np.random.default_rng(train_config.seed)
    gen = torch.Generator().manual_seed(train_config.seed)
    net = _seeded_init(encoder_config, train_config.seed)
    opt = torch.optim.Adam(net.parameters(), lr=train_config.learning_rate)
    first_rows, inverse = dataset.unique_states()
    row_lookup = {(int(e), int(t)): r for r, (e, t) in enumerate(dataset.index)}
    history = []

    for epoch in range(train_config.epochs):
        anchors = rng.permutation(len(dataset))
        if train_config.anchors_per_epoch:
            anchors = anchors[: train_config.anchors_per_epoch]
        quads = []
        for r in anchors:
            q = mine_quadruplet(dataset, tuple(dataset.index[r]), miner_config, rng)
            if q is not None:
                quads.append([row_lookup[q.anchor], row_lookup[q.positive], row_lookup[q.near_negative], row_lookup[q.far_negative]])
        if not quads:
            raise ConfigurationError("no valid quadruplets could be mined from the dataset")
        quads = np.asarray(quads)
        sums = np.zeros(4)
        n_batches = 0
        for b in range(0, len(quads), train_config.batch_size):
            rows = quads[b : b + train_config.batch_size]
            uid = inverse[rows]
            uniq, local, counts = np.unique(uid, return_inverse=True, return_counts=True)
            x = to_tensor(dataset.states(first_rows[uniq]))
            recon, mu, logvar = net(x, generator=gen)
            z = mu.flatten(1)[torch.from_numpy(local.reshape(rows.shape))]
            q_loss = quadruplet_loss(z[:, 0], z[:, 1], z[:, 2], z[:, 3], miner_config.m1, miner_config.m2)
            v_loss, rec, kl = vae_loss(
                x, recon, (mu, logvar), train_config.kl_weight, weights=torch.from_numpy(counts).float()
            )
            loss = q_loss + v_loss
            if not torch.isfinite(loss):
                raise NumericError(f"non-finite pre-training loss at epoch {epoch}, batch {n_batches}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            sums += [loss.item(), q_loss.item(), rec.item(), kl.item()]
            n_batches += 1
        row = dict(zip(("loss", "quadruplet", "reconstruction", "kl"), (sums / n_batches).tolist()))
        row.update(epoch=epoch, n_quadruplets=int(len(quads)))
        history.append(row)
        log.info("pretrain epoch %d: %s", epoch, row)
        if on_epoch:
            on_epoch(row)

    return Encoder(encoder_config, net, frozen=True), history


def separation_stats(
    encoder: Encoder,
    dataset: DemonstrationDataset,
    miner_config: MinerConfig,
    n: int = 500,
    seed: int = 0,
) -> dict:
    """Mean anchor-positive vs anchor-near-negative latent distance over mined quadruplets."""
    rng = np.random.default_rng(seed)
    lat = encode_dataset(encoder, dataset)
    row_lookup = {(int(e), int(t)): r for r, (e, t) in enumerate(dataset.index)}
    ap, an = [], []
    for r in rng.permutation(len(dataset)):
        q = mine_quadruplet(dataset, tuple(dataset.index[r]), miner_config, rng)
        if q is None:
            continue
        a, p, ng = (lat[row_lookup[k]] for k in (q.anchor, q.positive, q.near_negative))
        ap.append(np.linalg.norm(a - p))
        an.append(np.linalg.norm(a - ng))
        if len(ap) == n:
            break
    return {"n": len(ap), "anchor_positive": float(np.mean(ap)), "anchor_near_negative": float(np.mean(an))}
