"""The three-stage editor.

The editor sees only the source latent, the source token sets, the two
condition embeddings, a seed and the configuration.  It never receives
ground-truth masks or target assets; those live in :mod:`velocity_edit.pipeline`.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .config import EditConfig
from .flow import Condition
from .flowedit import edit_loop, plain_mean
from .pmg import pmg_rule
from .rasi import PhiCache, calibrate
from .tar import StageResult, run_stage
from .toy.nets import DenseVelocityNet, SparseSampler, ToyNet
from .toy.shapes import SparseSlat, coords_from_mask

# stream id for the sparse-stage noise, kept apart from the per-step edit streams
_STAGE_STREAM = 7


class EditError(RuntimeError):
    pass


@dataclass
class Models:
    dense: ToyNet
    geometry: ToyNet
    material: ToyNet


@dataclass
class EditorInputs:
    x_src: np.ndarray
    src_geometry: SparseSlat       # source encodings of the two token stages
    src_material: SparseSlat
    c_src: Condition
    c_tgt: Condition
    seed: int = 0


@dataclass
class EditorOutput:
    z_edit: np.ndarray
    coords: np.ndarray
    geometry: SparseSlat
    material: SparseSlat
    geometry_stage: StageResult | None
    material_stage: StageResult | None
    phi_cache: PhiCache | None
    trace: list = field(default_factory=list)
    log: list[str] = field(default_factory=list)


class _LoggedSampler:
    """Records ``stage:sample:<role>`` for every sampler invocation."""

    def __init__(self, inner: SparseSampler, stage: str, log: list[str]):
        self.inner, self.stage, self.log = inner, stage, log

    @property
    def calls(self) -> int:
        return self.inner.calls

    def __call__(self, coords, eps, c, geometry=None):
        self.log.append(f"{self.stage}:sample:{getattr(c, 'role', '?')}")
        return self.inner(coords, eps, c, geometry)


def _sparse_stage(name, sampler, coords, eps, inputs, enc, config: EditConfig, log, geometry=None):
    if config.modules.tar:
        result = run_stage(sampler, coords, eps, inputs.c_src, inputs.c_tgt, enc, config.tar, geometry)
        log.append(f"{name}:blend")
        return result.blended, result
    return sampler(coords, eps, inputs.c_tgt, geometry), None


def run_editor(inputs: EditorInputs, models: Models, config: EditConfig) -> EditorOutput:
    """Calibrate, edit the dense latent, decode the occupancy, then edit both token stages."""
    log: list[str] = []
    field_ = DenseVelocityNet(models.dense)
    x_src = np.asarray(inputs.x_src, dtype=np.float64)
    sched, guide, S = config.schedule, config.guidance, config.sampling.S

    cache = None
    phi = np.zeros(field_.cond_dim)
    if config.modules.rasi:
        log.append("stage1:calibrate")
        cache = calibrate(field_, x_src, inputs.c_src, sched, guide, config.rasi, S=S, seed=inputs.seed)
        phi = cache
    rule = pmg_rule(config.pmg) if config.modules.pmg else plain_mean
    trace: list = []
    log.append("stage1:edit")
    z_edit = edit_loop(field_, x_src, inputs.c_src, inputs.c_tgt, sched, guide, S, rule,
                       phi=phi, seed=inputs.seed, trace=trace)

    log.append("stage1:decode")
    coords = coords_from_mask(z_edit[0] > 0)
    if len(coords) == 0:
        raise EditError("edited occupancy is empty; nothing to decode")

    rng = np.random.default_rng([inputs.seed, _STAGE_STREAM])
    eps_geo = rng.standard_normal((len(coords), models.geometry.out_dim))
    eps_mat = rng.standard_normal((len(coords), models.material.out_dim))
    steps, omega = config.sampling.sparse_steps, config.sampling.sparse_omega

    geo_sampler = _LoggedSampler(SparseSampler(models.geometry, steps, omega), "stage2", log)
    geometry, geo_stage = _sparse_stage("stage2", geo_sampler, coords, eps_geo, inputs, inputs.src_geometry,
                                        config, log)
    mat_sampler = _LoggedSampler(SparseSampler(models.material, steps, omega), "stage3", log)
    material, mat_stage = _sparse_stage("stage3", mat_sampler, coords, eps_mat, inputs, inputs.src_material,
                                        config, log, geometry=geometry.feats)
    return EditorOutput(z_edit, coords, geometry, material, geo_stage, mat_stage, cache, trace, log)
