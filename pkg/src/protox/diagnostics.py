"""Contrast a good agent's explanations with those of an agent that never jumps."""

from __future__ import annotations

import html
from dataclasses import dataclass

import numpy as np

from .corridor import Action, CorridorConfig, frame_obstacles
from .demonstrations import DemonstrationDataset
from .errors import ConfigurationError, StateError
from .evaluation import ZERO_THRESHOLD
from .explanation import (
    Contribution,
    Explanation,
    ImportanceMap,
    explain,
    heatmap_overlay,
    importance_map,
    source_state,
)
from .model import ProtoXModel


@dataclass
class ModelDiagnosis:
    label: str
    explanation: Explanation
    top: Contribution
    source_action: int  # expert action recorded at the cited prototype's source state
    source_frames: np.ndarray
    importance: ImportanceMap
    localized: bool  # importance maximum lies on an obstacle of the source frame


@dataclass
class DiagnosisBundle:
    probe: np.ndarray
    good: ModelDiagnosis
    bad: ModelDiagnosis
    section_html: str
    images: dict[str, np.ndarray]


def select_probes(dataset: DemonstrationDataset, action: int = Action.JUMP) -> np.ndarray:
    """Rows of flip points where the expert switches to ``action``."""
    rows = dataset.flip_rows()
    return rows[dataset.actions[rows] == int(action)]


def jump_weight_violations(model: ProtoXModel, jump: int = Action.JUMP) -> np.ndarray:
    """Prototype ids whose weight toward ``jump`` exceeds the zero threshold."""
    return np.flatnonzero(model.W.detach().numpy()[:, int(jump)] > ZERO_THRESHOLD)


def top_contribution(exp: Explanation) -> Contribution:
    """The prototype contributing most toward the predicted action."""
    return max(exp.contributions, key=lambda c: (c.contribution, -c.prototype_id))


def localizes(imap: ImportanceMap, source_frame: np.ndarray, env_config: CorridorConfig) -> bool:
    r, c = np.unravel_index(int(np.argmax(imap.heatmap)), imap.heatmap.shape)
    if imap.heatmap[r, c] <= 0:
        return False
    return any(r0 <= r < r1 and c0 <= c < c1 for _, _, (r0, r1, c0, c1) in frame_obstacles(source_frame, env_config))


def diagnose_model(
    label: str,
    model: ProtoXModel,
    probe: np.ndarray,
    dataset: DemonstrationDataset,
    env_config: CorridorConfig,
    patch_size: int = 8,
    stride: int = 4,
    keep_fraction: float = 0.95,
    mask_value="mean",
    top_k: int = 5,
) -> ModelDiagnosis:
    if model.dataset_hash is not None and model.dataset_hash != dataset.content_hash():
        raise ConfigurationError(f"{label} model was not trained on the dataset supplied for it")
    exp = explain(model, probe, top_k=top_k, dataset=dataset)
    top = top_contribution(exp)
    src = source_state(dataset, top.source)
    imap = importance_map(
        model, probe, top.prototype_id, src, patch_size, stride, mask_value, keep_fraction, dataset=dataset
    )
    action = int(dataset.actions[dataset.row_of(*top.source)])
    return ModelDiagnosis(label, exp, top, action, src, imap, localizes(imap, src[0], env_config))


def run_diagnosis(
    good_model: ProtoXModel,
    bad_model: ProtoXModel,
    probe_state,
    good_dataset: DemonstrationDataset,
    bad_dataset: DemonstrationDataset,
    env_config: CorridorConfig,
    name: str = "probe",
    **kwargs,
) -> DiagnosisBundle:
    """Explain one probe with both models and build a side-by-side report section."""
    for m in (good_model, bad_model):
        if not m.is_projected:
            raise StateError("both models must be trained and projected")
    probe = probe_state.frames if hasattr(probe_state, "frames") else np.asarray(probe_state)
    good = diagnose_model("good", good_model, probe, good_dataset, env_config, **kwargs)
    bad = diagnose_model("bad", bad_model, probe, bad_dataset, env_config, **kwargs)

    images = {f"{name}_input.png": probe[0]}
    cells = [f"<figure><img src='img/{name}_input.png' alt='probe'><figcaption>probe</figcaption></figure>"]
    for d in (good, bad):
        images[f"{name}_{d.label}_proto.png"] = d.source_frames[0]
        images[f"{name}_{d.label}_heat.png"] = heatmap_overlay(d.source_frames[0], d.importance.heatmap)
        cap = (
            f"{d.label}: {html.escape(d.explanation.summary())}<br>"
            f"p{d.top.prototype_id} [{html.escape(d.top.action_tag)}], source action "
            f"{html.escape(good_model.action_set[d.source_action])}"
        )
        cells.append(
            f"<figure><img src='img/{name}_{d.label}_proto.png' alt='{d.label} prototype'>"
            f"<figcaption>{cap}</figcaption></figure>"
            f"<figure><img src='img/{name}_{d.label}_heat.png' alt='{d.label} importance'>"
            f"<figcaption>{d.label} importance</figcaption></figure>"
        )
    section = f"<div class='card'><h2>Diagnosis: {html.escape(name)}</h2>{''.join(cells)}</div>"
    return DiagnosisBundle(probe, good, bad, section, images)
