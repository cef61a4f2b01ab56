"""Staged generation: per stage, realize the structure map (trivial, flow
sampled, forced, or user-supplied), sample that stage's tokens from guided
top-p filtered logits, and add the refined placement onto the canvas.

Guidance and nucleus schedules sharpen over the stages: top-p decays
log-linearly from 1.0 to 0.5 and the guidance scale grows linearly to 2.5
(structure) or 3.5 (content). User overrides replace sampling per stage and
mix freely with generated stages as long as parent-consistency holds.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .content_model import ContentModel, cfg_logits
from .errors import InvariantError
from .grid import (
    Codebook,
    ContentTokens,
    LatentGrid,
    StructureMap,
    VGSequence,
    assign,
)
from .structcode import embed_structure_map
from .structure_model import StructureModel, flow_sample, gumbel_balanced_split

__all__ = ["ScheduleParams", "GenerationRequest", "GenerationStats",
           "GenerationResult", "cfg_schedule", "top_p_schedule", "sample_token",
           "forced_final_split", "generate"]


@dataclass(frozen=True)
class ScheduleParams:
    flow_steps: int = 25
    cfg_content_end: float = 3.5
    cfg_structure_end: float = 2.5
    top_p_end: float = 0.5
    cfg_constant: float | None = None     # overrides both ramps when set
    top_p_constant: float | None = None

    def __post_init__(self):
        if self.flow_steps < 1:
            raise InvariantError("flow_steps must be positive")


@dataclass(frozen=True, eq=False)
class GenerationRequest:
    class_id: int
    seed: int
    h: int
    w: int
    e: int
    structure_overrides: dict = field(default_factory=dict)   # stage -> StructureMap
    content_overrides: dict = field(default_factory=dict)     # stage -> ContentTokens
    schedule: ScheduleParams = field(default_factory=ScheduleParams)

    def __post_init__(self):
        hw = self.h * self.w
        if hw < 1 or hw & (hw - 1):
            raise InvariantError("h*w must be a power of two")
        last = hw.bit_length() - 1
        for stage, smap in self.structure_overrides.items():
            if not isinstance(smap, StructureMap) or smap.stage != stage:
                raise InvariantError(f"override at stage {stage} has wrong stage tag")
            if smap.labels.shape != (self.h, self.w):
                raise InvariantError(f"override at stage {stage} has wrong shape")
            if stage < 0 or stage > last:
                raise InvariantError(f"override stage {stage} outside [0, {last}]")
        # overridden stages must nest with each other (ancestor labels agree)
        stages = sorted(self.structure_overrides)
        for a, b in zip(stages, stages[1:]):
            coarse = self.structure_overrides[a].labels
            fine = self.structure_overrides[b].labels
            if not np.array_equal(fine >> (b - a), coarse):
                raise InvariantError(
                    f"structure overrides at stages {a} and {b} are not nested")
        for stage, tokens in self.content_overrides.items():
            if not isinstance(tokens, ContentTokens) or tokens.stage != stage:
                raise InvariantError(f"token override at stage {stage} has wrong stage tag")

    @property
    def last_stage(self) -> int:
        return (self.h * self.w).bit_length() - 1


@dataclass
class GenerationStats:
    """Sampling-step counters: one content step per generated stage, one flow
    step per Euler update (guidance pairs count as one step)."""

    content_steps: int = 0
    flow_steps: int = 0


@dataclass(frozen=True, eq=False)
class GenerationResult:
    sequence: VGSequence
    canvas: LatentGrid
    stats: GenerationStats


def cfg_schedule(stage: int, kind: str, last_stage: int,
                 content_end: float = 3.5, structure_end: float = 2.5) -> float:
    """Linearly rising guidance scale over the stages the generator runs."""
    if kind == "content":
        if not 0 <= stage <= last_stage:
            raise InvariantError(f"content runs at stages 0..{last_stage}")
        frac = stage / last_stage if last_stage else 0.0
        return 1.0 + (content_end - 1.0) * frac
    if kind == "structure":
        if not 1 <= stage <= last_stage - 1:
            raise InvariantError(f"structure runs at stages 1..{last_stage - 1}")
        span = last_stage - 2
        frac = (stage - 1) / span if span > 0 else 0.0
        return 1.0 + (structure_end - 1.0) * frac
    raise InvariantError(f"unknown generator kind {kind!r}")


def top_p_schedule(stage: int, last_stage: int, final_p: float = 0.5) -> float:
    """Log-linear nucleus width: 1.0 at stage 0 down to final_p at the end."""
    if not 0 <= stage <= last_stage:
        raise InvariantError(f"stage {stage} outside [0, {last_stage}]")
    if last_stage == 0:
        return 1.0
    return float(final_p ** (stage / last_stage))


def sample_token(logits: np.ndarray, p: float, rng) -> int:
    """Nucleus sampling: keep the smallest descending-probability prefix with
    cumulative mass >= p, renormalize, draw. Ties sort by lowest index."""
    if not 0.0 < p <= 1.0:
        raise InvariantError(f"top-p must lie in (0, 1], got {p}")
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    logits = np.asarray(logits, dtype=np.float64)
    shifted = logits - logits.max()
    probs = np.exp(shifted)
    probs /= probs.sum()
    order = np.argsort(-logits, kind="stable")
    cum = np.cumsum(probs[order])
    cut = int(np.searchsorted(cum, p, side="left"))
    cut = min(cut, logits.size - 1)
    kept = order[:cut + 1]
    kept_probs = probs[kept]
    kept_probs /= kept_probs.sum()
    r = rng.random()
    pick = int(np.searchsorted(np.cumsum(kept_probs), r, side="right"))
    return int(kept[min(pick, kept.size - 1)])


def forced_final_split(parent_map: StructureMap) -> StructureMap:
    """Deterministic split of 2-element clusters into singletons; the child
    holding the smaller row-major location gets label 2j."""
    if parent_map.cluster_size != 2:
        raise InvariantError("forced split needs clusters of exactly two locations")
    parent_flat = parent_map.labels.ravel()
    child = np.empty_like(parent_flat)
    for j in range(parent_map.num_clusters):
        locs = np.flatnonzero(parent_flat == j)
        child[locs[0]] = 2 * j
        child[locs[1]] = 2 * j + 1
    return StructureMap(parent_map.stage + 1, child.reshape(parent_map.labels.shape))


def _realized_bit_column(smap: StructureMap) -> np.ndarray:
    # the newest embedding column is twice the child-label parity
    return (2 * (smap.labels & 1)).astype(np.float32)


def generate(req: GenerationRequest, content_model: ContentModel,
             structure_model: StructureModel, codebook: Codebook,
             refiners) -> GenerationResult:
    """Run the full staged loop and return (sequence, canvas, step counters)."""
    last = req.last_stage
    h, w_grid, e = req.h, req.w, req.e
    if codebook.dim != e:
        raise InvariantError("codebook dim does not match the request")
    if content_model.config.last_stage != last or structure_model.config.last_stage != last:
        raise InvariantError("model stage depth does not match the request")
    if len(refiners) != last + 1:
        raise InvariantError(f"need {last + 1} refiners, got {len(refiners)}")
    if not 0 <= req.class_id < content_model.config.num_classes:
        raise InvariantError("class id out of range")

    rng = np.random.default_rng(req.seed)
    sched = req.schedule
    null_id = content_model.config.null_class_id
    stats = GenerationStats()

    x = np.zeros((h, w_grid, e), dtype=np.float32)
    s_e = np.ones((h, w_grid, last), dtype=np.float32)
    maps: list[StructureMap] = []
    stages = []

    for k in range(last + 1):
        # ---- structure ----
        if k == 0:
            smap = StructureMap(0, np.zeros((h, w_grid), dtype=np.int32))
        elif k in req.structure_overrides:
            smap = req.structure_overrides[k]
            if not np.array_equal(smap.labels >> 1, maps[k - 1].labels):
                raise InvariantError(
                    f"structure override at stage {k} is not parent-consistent "
                    f"with the realized stage {k - 1}")
        elif k == last:
            smap = forced_final_split(maps[k - 1])
        else:
            scale = sched.cfg_constant if sched.cfg_constant is not None else \
                cfg_schedule(k, "structure", last, structure_end=sched.cfg_structure_end)

            def velocity_fn(z, t, use_null, _stage=k):
                state_class = null_id if use_null else req.class_id
                out = structure_model.velocity(
                    np.array([state_class]), np.array([_stage]), x[None],
                    z[None], np.array([t]), np.array([_stage - 1]))
                return out.data[0]

            pred = flow_sample(velocity_fn, s_e, stage=k, n_steps=sched.flow_steps,
                               cfg_scale=scale, rng=rng,
                               step_hook=lambda: setattr(stats, "flow_steps",
                                                         stats.flow_steps + 1))
            smap = gumbel_balanced_split(maps[k - 1], pred[:, :, k - 1], rng)
        if k >= 1:
            s_e[:, :, k - 1] = _realized_bit_column(smap)
        maps.append(smap)

        # ---- content ----
        if k in req.content_overrides:
            tokens = req.content_overrides[k]
        else:
            emb = embed_structure_map(smap, last)
            scale = sched.cfg_constant if sched.cfg_constant is not None else \
                cfg_schedule(k, "content", last, content_end=sched.cfg_content_end)
            p = sched.top_p_constant if sched.top_p_constant is not None else \
                top_p_schedule(k, last, final_p=sched.top_p_end)
            pred_c = content_model.forward_final_canvas(
                np.array([req.class_id]), np.array([k]), x[None], emb[None])
            logits_c = content_model.token_logits(pred_c[0], x, smap).data
            if scale != 1.0:
                pred_u = content_model.forward_final_canvas(
                    np.array([null_id]), np.array([k]), x[None], emb[None])
                logits_u = content_model.token_logits(pred_u[0], x, smap).data
                logits = cfg_logits(logits_c, logits_u, scale)
            else:
                logits = logits_c
            indices = np.array([sample_token(logits[j], p, rng)
                                for j in range(smap.num_clusters)], dtype=np.int32)
            tokens = ContentTokens(k, indices)
            stats.content_steps += 1

        x = x + refiners[k].apply(assign(tokens, smap, codebook).data)
        stages.append((tokens, smap))

    return GenerationResult(VGSequence(tuple(stages)), LatentGrid(x), stats)
