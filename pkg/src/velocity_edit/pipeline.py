"""Evaluation harness around the editor: requests, metrics and the ablation table.

Ground truth (target shapes, preserve masks) is used here only to score an
edit after the editor has returned.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import EditConfig, Modules
from .editor import EditorInputs, EditorOutput, Models, run_editor
from .toy.nets import load_checkpoint
from .toy.shapes import (HAT_RANGE, RHO_RANGE, ShapeParams, SparseSlat, coord_keys, embed_condition,
                         encode_source_tokens, gen_shape, preserve_mask)

CHECKPOINT_NAMES = {"dense": "dense.bin", "geometry": "geometry.bin", "material": "material.bin"}

ABLATION_CONFIGS = (
    Modules(False, False, False),
    Modules(True, False, False),
    Modules(True, True, False),
    Modules(True, True, True),
)

METRIC_KEYS = ("preserved_drift", "edit_response", "iou", "edit_iou", "geometry_preserve_dist",
               "material_preserve_dist")


def load_models(directory) -> Models:
    directory = Path(directory)
    nets = {}
    for kind, name in CHECKPOINT_NAMES.items():
        path = directory / name
        if not path.exists():
            raise FileNotFoundError(f"missing checkpoint {path}")
        nets[kind] = load_checkpoint(path)
    return Models(**nets)


@dataclass(frozen=True)
class EditRequest:
    source: ShapeParams
    target: ShapeParams
    seed: int = 0
    config: EditConfig = EditConfig()


@dataclass
class EditReport:
    request: EditRequest
    output: EditorOutput
    metrics: dict[str, float]
    step_trace: list[dict] = field(default_factory=list)

    def metrics_json(self) -> str:
        return json.dumps({k: float(v) for k, v in self.metrics.items()}, sort_keys=True, indent=2)


def editor_inputs(request: EditRequest) -> EditorInputs:
    """Everything the editor may see: the source asset and both embeddings."""
    src = gen_shape(request.source)
    return EditorInputs(src.stage1.copy(), encode_source_tokens(src.geom), encode_source_tokens(src.mat),
                        embed_condition(request.source, "source"), embed_condition(request.target, "target"),
                        request.seed)


def _mean_or_nan(values: np.ndarray) -> float:
    return float(np.mean(values)) if values.size else float("nan")


def _iou(a: np.ndarray, b: np.ndarray) -> float:
    union = np.sum(a | b)
    return float(np.sum(a & b) / union) if union else 1.0


def _token_preserve_dist(out: SparseSlat, enc: SparseSlat, keep: np.ndarray) -> float:
    _, io, ie = np.intersect1d(coord_keys(out.coords), coord_keys(enc.coords), assume_unique=True,
                               return_indices=True)
    rows, cols = out.coords[io, 0], out.coords[io, 1]
    sel = keep[rows, cols]
    return _mean_or_nan(np.linalg.norm(out.feats[io[sel]] - enc.feats[ie[sel]], axis=1))


def score(request: EditRequest, inputs: EditorInputs, output: EditorOutput) -> tuple[dict, list]:
    """Region metrics against ground truth (evaluation only)."""
    tgt = gen_shape(request.target)
    keep = preserve_mask(request.source, request.target)
    change = np.abs(output.z_edit[0] - inputs.x_src[0])
    pred, truth = output.z_edit[0] > 0, tgt.stage1[0] > 0
    region = ~keep
    metrics = {
        "preserved_drift": _mean_or_nan(change[keep]),
        "edit_response": _mean_or_nan(change[region]),
        "iou": _iou(pred, truth),
        "edit_iou": _iou(pred & region, truth & region),
        "geometry_preserve_dist": _token_preserve_dist(output.geometry, inputs.src_geometry, keep),
        "material_preserve_dist": _token_preserve_dist(output.material, inputs.src_material, keep),
        "tokens": float(len(output.coords)),
    }
    steps = []
    for entry in output.trace:
        u = np.abs(entry["update"][0])
        row = {"k": entry["k"], "t": entry["t"], "update_preserve": _mean_or_nan(u[keep]),
               "update_edit": _mean_or_nan(u[region])}
        if output.phi_cache is not None and entry["k"] in output.phi_cache:
            e = output.phi_cache.entries[entry["k"]]
            row.update(rasi_loss_initial=e.loss_initial, rasi_loss_final=e.loss_final)
        steps.append(row)
    return metrics, steps


def edit(request: EditRequest, models: Models) -> EditReport:
    inputs = editor_inputs(request)
    output = run_editor(inputs, models, request.config)
    metrics, steps = score(request, inputs, output)
    return EditReport(request, output, metrics, steps)


def add_hat_requests(n: int, seed: int = 0, config: EditConfig = EditConfig()) -> list[EditRequest]:
    """``n`` hat-adding edits on hatless bodies, one request seed each."""
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        src = ShapeParams(float(rng.uniform(*RHO_RANGE)), 0.0, float(rng.random()), float(rng.random()))
        tgt = src.with_hat(float(rng.uniform(*HAT_RANGE)), float(rng.random()))
        out.append(EditRequest(src, tgt, seed * 1000 + i, config))
    return out


@dataclass
class AblationRow:
    request: int
    seed: int
    config: str
    metrics: dict[str, float]


def ablate(requests: list[EditRequest], models: Models, configs=ABLATION_CONFIGS) -> list[AblationRow]:
    """Every request under every module configuration, with the request's seed shared (paired)."""
    if not requests:
        raise ValueError("ablation needs at least one request")
    rows = []
    for i, req in enumerate(requests):
        for mods in configs:
            r = EditRequest(req.source, req.target, req.seed, req.config.with_modules(mods))
            rows.append(AblationRow(i, req.seed, mods.label, edit(r, models).metrics))
    return rows


def write_ablation_csv(path, rows: list[AblationRow]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["request", "seed", "config", *METRIC_KEYS])
        for r in rows:
            w.writerow([r.request, r.seed, r.config, *(repr(float(r.metrics[k])) for k in METRIC_KEYS)])


def ablation_medians(rows: list[AblationRow]) -> dict[str, dict[str, float]]:
    """Per-configuration medians of each metric (NaNs ignored)."""
    out: dict[str, dict[str, float]] = {}
    for label in dict.fromkeys(r.config for r in rows):
        sel = [r.metrics for r in rows if r.config == label]
        out[label] = {k: float(np.nanmedian([m[k] for m in sel])) for k in METRIC_KEYS}
    return out
