"""Explanations: evidence decomposition, occlusion importance maps, neighbour overlays, HTML reports."""

from __future__ import annotations

import html
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from PIL import Image

from .demonstrations import DemonstrationDataset
from .errors import ConfigurationError, StateError
from .model import ProtoXModel, l2_norm
from .pretrain import encode_dataset


@dataclass
class Contribution:
    prototype_id: int
    action_tag: str
    source: tuple[int, int]
    similarity: float
    weight: float
    contribution: float


@dataclass
class Explanation:
    input_state: np.ndarray  # (C, H, W, 3)
    predicted_action: int
    action_name: str
    evidence: np.ndarray
    contributions: list[Contribution]  # toward the predicted action, by |contribution| desc
    contribution_matrix: np.ndarray  # (P, |A|): similarity * weight for every action
    action_set: tuple[str, ...] = ()
    top_k: int = 5
    prototype_frames: dict[int, np.ndarray] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "predicted_action": self.action_name,
            "evidence": [float(v) for v in self.evidence],
            "contributions": [
                {
                    "prototype_id": c.prototype_id,
                    "action_tag": c.action_tag,
                    "source": list(c.source),
                    "similarity": c.similarity,
                    "weight": c.weight,
                    "contribution": c.contribution,
                }
                for c in self.contributions
            ],
        }

    def summary(self) -> str:
        return f"{self.action_name} with evidence {self.evidence[self.predicted_action]:.1f}"


@dataclass
class ImportanceMap:
    heatmap: np.ndarray  # (H, W), >= 0
    patch: tuple[int, int]  # (size, stride)
    keep_fraction: float
    prototype_id: int
    base_similarity: float


@dataclass
class OverlayImage:
    composite: np.ndarray  # (H, W, 3) uint8
    rows: np.ndarray
    distances: np.ndarray


def explain(model: ProtoXModel, state, top_k: int = 5, dataset: DemonstrationDataset | None = None) -> Explanation:
    """Decompose the model's decision on one state into per-prototype contributions.

    If ``dataset`` is given, the most recent source frame of each of the
    ``top_k`` contributing prototypes is attached for rendering.
    """
    if not model.is_projected:
        raise StateError("explain() needs a projected model; every prototype must have a source state")
    frames = state.frames if hasattr(state, "frames") else np.asarray(state)
    z = model.encode_states(frames[None])
    with torch.no_grad():
        ev, sims, _ = model(z)
    ev, sims = ev[0].numpy(), sims[0].numpy()
    W = model.W.detach().numpy()
    matrix = sims[:, None] * W
    action = int(np.argmax(ev))
    contribs = [
        Contribution(
            prototype_id=i,
            action_tag=model.action_set[int(model.proto_actions[i])],
            source=(int(model.source_index[i, 0]), int(model.source_index[i, 1])),
            similarity=float(sims[i]),
            weight=float(W[i, action]),
            contribution=float(matrix[i, action]),
        )
        for i in range(model.n_prototypes)
    ]
    contribs.sort(key=lambda c: (-abs(c.contribution), c.prototype_id))
    exp = Explanation(frames, action, model.action_set[action], ev, contribs, matrix, tuple(model.action_set), top_k)
    if dataset is not None:
        for c in contribs[:top_k]:
            exp.prototype_frames[c.prototype_id] = source_state(dataset, c.source)[0]
    return exp


def source_state(dataset: DemonstrationDataset, source: tuple[int, int]) -> np.ndarray:
    return dataset.states([dataset.row_of(int(source[0]), int(source[1]))])[0]


def mean_pixel_color(dataset: DemonstrationDataset) -> np.ndarray:
    totals = np.zeros(3)
    count = 0
    for tr in dataset.trajectories:
        totals += tr.observations.reshape(-1, 3).sum(0, dtype=np.float64)
        count += tr.observations.shape[0] * tr.observations.shape[1] * tr.observations.shape[2]
    return totals / max(count, 1)


def _positions(size: int, patch: int, stride: int) -> list[int]:
    pos = list(range(0, size - patch + 1, stride))
    if pos[-1] != size - patch:
        pos.append(size - patch)
    return pos


def keep_top(values: np.ndarray, keep_fraction: float) -> np.ndarray:
    """Zero all but the floor(keep_fraction * N) largest entries (ties broken by position)."""
    flat = values.ravel()
    n_keep = int(math.floor(keep_fraction * flat.size + 1e-9))
    out = np.zeros_like(flat)
    if n_keep:
        order = np.argsort(-flat, kind="stable")[:n_keep]
        out[order] = flat[order]
    return out.reshape(values.shape)


def importance_map(
    model: ProtoXModel,
    input_state,
    prototype_id: int,
    source_frames: np.ndarray,
    patch_size: int = 8,
    stride: int = 4,
    mask_value="mean",
    keep_fraction: float = 0.95,
    dataset: DemonstrationDataset | None = None,
) -> ImportanceMap:
    """Occlusion importance over a prototype's source image.

    Each patch of the most recent source frame is filled with ``mask_value``,
    the masked state is re-encoded and mapped through A, and the drop in
    similarity to the input is recorded. A pixel's importance is the mean drop
    over the patches covering it. ``mask_value`` may be an RGB triple, "mean"
    (mean dataset colour, needs ``dataset``) or "identity" (no perturbation).
    """
    if not 0 < keep_fraction <= 1:
        raise ConfigurationError("keep_fraction must be in (0, 1]")
    src = np.asarray(source_frames)
    _, H, W, _ = src.shape
    if patch_size > H or patch_size > W or patch_size < 1 or stride < 1:
        raise ConfigurationError(f"patch {patch_size} / stride {stride} invalid for a {H}x{W} image")
    if isinstance(mask_value, str):
        if mask_value == "mean":
            if dataset is None:
                raise ConfigurationError("mask_value='mean' requires the dataset")
            fill = mean_pixel_color(dataset)
        elif mask_value == "identity":
            fill = None
        else:
            raise ConfigurationError(f"unknown mask_value {mask_value!r}")
    else:
        fill = np.asarray(mask_value, dtype=np.float64)
    if fill is not None:
        fill = np.clip(np.rint(fill), 0, 255).astype(np.uint8)

    frames = input_state.frames if hasattr(input_state, "frames") else np.asarray(input_state)
    rows, cols = _positions(H, patch_size, stride), _positions(W, patch_size, stride)
    masked = np.repeat(src[None], len(rows) * len(cols), axis=0)
    boxes = []
    for i, r in enumerate(rows):
        for j, c in enumerate(cols):
            if fill is not None:
                masked[i * len(cols) + j, 0, r : r + patch_size, c : c + patch_size] = fill
            boxes.append((r, c))
    lat = model.encode_states(np.concatenate([frames[None], src[None], masked]))
    with torch.no_grad():
        emb = model.embed(lat)
        x, base, rest = emb[0], emb[1], emb[2:]
        sim_base = math.exp(-model.beta * float(l2_norm(x - base)))
        sims = torch.exp(-model.beta * l2_norm(rest - x)).numpy()
    drop = np.maximum(0.0, sim_base - sims)
    total = np.zeros((H, W))
    cover = np.zeros((H, W))
    for d, (r, c) in zip(drop, boxes):
        total[r : r + patch_size, c : c + patch_size] += d
        cover[r : r + patch_size, c : c + patch_size] += 1
    heat = np.divide(total, cover, out=np.zeros_like(total), where=cover > 0)
    return ImportanceMap(keep_top(heat, keep_fraction), (patch_size, stride), keep_fraction, prototype_id, sim_base)


def nearest_overlay(
    model_or_encoder,
    state,
    dataset: DemonstrationDataset,
    n: int = 30,
    use_isometry: bool = True,
    dedupe: bool = True,
    latents: np.ndarray | None = None,
) -> OverlayImage:
    """Blend the most recent frames of the n dataset states closest to ``state``.

    Distances are taken on f(x) or on A f(x) (``use_isometry``). With
    ``dedupe`` each distinct state is counted once, so exact repeats do not
    crowd out the neighbourhood.
    """
    if isinstance(model_or_encoder, ProtoXModel):
        encoder, A = model_or_encoder.encoder, model_or_encoder.A.detach()
    else:
        encoder, A = model_or_encoder, None
        if use_isometry:
            raise ConfigurationError("use_isometry=True needs a ProtoX model, not a bare encoder")
    frames = state.frames if hasattr(state, "frames") else np.asarray(state)
    if dedupe:
        first, _ = dataset.unique_states()
        candidates = first
    else:
        candidates = np.arange(len(dataset))
    if n < 1 or n > len(candidates):
        raise ConfigurationError(f"n={n} outside [1, {len(candidates)}] available states")
    if latents is None:
        latents = encode_dataset(encoder, dataset)
    cand = torch.from_numpy(np.asarray(latents)[candidates])
    q = torch.from_numpy(encoder.encode_batch(frames[None]).reshape(1, -1))
    if use_isometry:
        cand, q = cand @ A.T, q @ A.T
    d = l2_norm(cand - q).numpy()
    order = np.argsort(d, kind="stable")[:n]
    rows = candidates[order]
    imgs = dataset.states(rows)[:, 0].astype(np.float64)
    composite = np.rint(imgs.mean(axis=0)).clip(0, 255).astype(np.uint8)
    return OverlayImage(composite, rows, d[order])


# --- report rendering -------------------------------------------------------

_CSS = """body{font-family:sans-serif;margin:2em;color:#222}
img{image-rendering:pixelated;width:192px;height:192px;border:1px solid #999;margin:2px}
.card{border:1px solid #ccc;padding:1em;margin-bottom:1.5em}
table{border-collapse:collapse}td,th{padding:2px 8px;border-bottom:1px solid #eee;text-align:right}
figure{display:inline-block;margin:4px;text-align:center;font-size:0.85em}"""


def heatmap_overlay(frame: np.ndarray, heat: np.ndarray, alpha: float = 0.6) -> np.ndarray:
    peak = heat.max()
    h = heat / peak if peak > 0 else heat
    red = np.zeros_like(frame, dtype=np.float64)
    red[..., 0] = 255.0
    w = (alpha * h)[..., None]
    return np.rint(frame * (1 - w) + red * w).clip(0, 255).astype(np.uint8)


def _png(path: Path, img: np.ndarray) -> None:
    Image.fromarray(np.asarray(img, dtype=np.uint8)).save(path, format="PNG", optimize=False)


def render_report(
    explanations: Sequence[Explanation],
    maps: Sequence[tuple[ImportanceMap, np.ndarray]] = (),
    out_dir: str | Path = "report",
    overlays: Sequence[tuple[str, OverlayImage]] = (),
    title: str = "ProtoX explanations",
    sections: Sequence[tuple[str, dict[str, np.ndarray]]] = (),
) -> Path:
    """Write report.html, img/*.png and explanations.json into ``out_dir``.

    ``maps`` pairs each importance map with the source frame it was computed
    on. ``sections`` are extra (HTML fragment, {image name: RGB array}) pairs;
    the fragment refers to its images as ``img/<name>``.
    """
    out = Path(out_dir)
    img_dir = out / "img"
    img_dir.mkdir(parents=True, exist_ok=True)
    parts = [f"<!DOCTYPE html><html><head><meta charset='utf-8'><title>{html.escape(title)}</title>",
             f"<style>{_CSS}</style></head><body><h1>{html.escape(title)}</h1>"]
    if not explanations and not maps and not overlays and not sections:
        parts.append("<p class='empty'>No explanations to show.</p>")

    for n, exp in enumerate(explanations):
        _png(img_dir / f"exp{n}_input.png", exp.input_state[0])
        parts.append(f"<div class='card'><h2>State {n}: {html.escape(exp.summary())}</h2>")
        parts.append(f"<figure><img src='img/exp{n}_input.png' alt='input'><figcaption>input</figcaption></figure>")
        for c in exp.contributions[: exp.top_k]:
            if c.prototype_id in exp.prototype_frames:
                name = f"exp{n}_proto{c.prototype_id}.png"
                _png(img_dir / name, exp.prototype_frames[c.prototype_id])
                parts.append(
                    f"<figure><img src='img/{name}' alt='prototype {c.prototype_id}'>"
                    f"<figcaption>p{c.prototype_id} [{html.escape(c.action_tag)}]<br>"
                    f"sim {c.similarity:.3f} x w {c.weight:.2f} = {c.contribution:.2f}</figcaption></figure>"
                )
        parts.append("<table><tr><th>action</th><th>evidence</th></tr>")
        for a, v in zip(exp.action_set, exp.evidence):
            parts.append(f"<tr><td>{html.escape(a)}</td><td>{v:.3f}</td></tr>")
        parts.append("</table></div>")

    for n, (imap, frame) in enumerate(maps):
        _png(img_dir / f"map{n}_source.png", frame)
        _png(img_dir / f"map{n}_heat.png", heatmap_overlay(frame, imap.heatmap))
        parts.append(
            f"<div class='card'><h2>Importance map {n} (prototype {imap.prototype_id})</h2>"
            f"<figure><img src='img/map{n}_source.png' alt='source'><figcaption>prototype source</figcaption></figure>"
            f"<figure><img src='img/map{n}_heat.png' alt='importance'><figcaption>patch {imap.patch[0]}, "
            f"stride {imap.patch[1]}, keep {imap.keep_fraction:.2f}</figcaption></figure></div>"
        )

    for n, (label, ov) in enumerate(overlays):
        _png(img_dir / f"overlay{n}.png", ov.composite)
        parts.append(
            f"<div class='card'><h2>{html.escape(label)}</h2><figure><img src='img/overlay{n}.png' alt='overlay'>"
            f"<figcaption>{len(ov.rows)} nearest states</figcaption></figure></div>"
        )
    for fragment, images in sections:
        for name in sorted(images):
            _png(img_dir / name, images[name])
        parts.append(fragment)
    parts.append("</body></html>\n")
    (out / "report.html").write_text("\n".join(parts), encoding="utf-8")

    payload = {
        "explanations": [e.to_dict() for e in explanations],
        "importance_maps": [
            {
                "prototype_id": m.prototype_id,
                "patch": list(m.patch),
                "keep_fraction": m.keep_fraction,
                "base_similarity": m.base_similarity,
                "argmax": [int(i) for i in np.unravel_index(int(np.argmax(m.heatmap)), m.heatmap.shape)],
            }
            for m, _ in maps
        ],
        "overlays": [{"label": lbl, "rows": ov.rows.tolist(), "distances": ov.distances.tolist()} for lbl, ov in overlays],
    }
    (out / "explanations.json").write_text(json.dumps(payload, indent=2, sort_keys=True), encoding="utf-8")
    return out / "report.html"

