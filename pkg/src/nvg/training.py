"""Training loops for both generators, the warmup-stable-decay learning-rate
schedule and desk-scale evaluation metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Adam, Tensor
from .content_model import ContentBatch, ContentModel
from .errors import InvariantError, NumericError
from .grid import Codebook, LatentGrid, VGSequence, accumulate_canvas
from .hierarchy import build_hierarchy
from .quantize import build_contents
from .structcode import embed_structure_map
from .structure_model import StructureModel, flow_sample, noised_input
from .synthetic import SyntheticSpec, make_synthetic_dataset  # noqa: F401  (re-export)

__all__ = [
    "TrainConfig",
    "TrainResult",
    "TokenizedExample",
    "tokenize_dataset",
    "wsd_lr",
    "train_content",
    "train_structure",
    "evaluate",
    "SyntheticSpec",
    "make_synthetic_dataset",
]


@dataclass(frozen=True)
class TrainConfig:
    steps: int
    batch_size: int = 16
    base_lr: float = 1e-4
    warmup_steps: int = 1000
    decay_start_fraction: float = 0.8
    final_lr_fraction: float = 0.1
    null_rate: float = 0.10
    seed: int = 0

    def __post_init__(self):
        if self.steps < 0 or self.batch_size < 1:
            raise InvariantError("invalid step/batch configuration")
        if not 0.0 < self.decay_start_fraction <= 1.0:
            raise InvariantError("decay_start_fraction must lie in (0, 1]")
        if not 0.0 < self.final_lr_fraction <= 1.0:
            raise InvariantError("final_lr_fraction must lie in (0, 1]")
        if not 0.0 <= self.null_rate < 1.0:
            raise InvariantError("null_rate must lie in [0, 1)")


def wsd_lr(step: int, config: TrainConfig) -> float:
    """Warmup-stable-decay schedule on the base rate.

    Linear warmup over warmup_steps, flat at base_lr, then linear decay to
    base_lr * final_lr_fraction at the last step.
    """
    if step < 0:
        raise InvariantError("step must be non-negative")
    total = config.steps
    warm = min(config.warmup_steps, total)
    if warm > 0 and step < warm:
        return config.base_lr * step / warm
    decay_start = max(warm, math.ceil(config.decay_start_fraction * total))
    if step < decay_start or total - 1 <= decay_start:
        return config.base_lr
    frac = (step - decay_start) / (total - 1 - decay_start)
    frac = min(frac, 1.0)
    return config.base_lr * (1.0 - (1.0 - config.final_lr_fraction) * frac)


def _batch_lr(step: int, config: TrainConfig) -> float:
    # the base rate is quoted at batch 256 and scaled linearly to the actual batch
    return wsd_lr(step, config) * config.batch_size / 256.0


@dataclass(frozen=True, eq=False)
class TokenizedExample:
    """One dataset item with everything the trainers need precomputed."""

    class_id: int
    grid: LatentGrid
    sequence: VGSequence
    canvases: tuple          # canvases[i]: accumulated stages < i, (h, w, e)
    target_canvas: np.ndarray
    struct_embs: tuple       # per-stage (h, w, K) integer embeddings
    flow_target: np.ndarray  # full-depth embedding, float32 (h, w, K)


def tokenize_dataset(dataset, codebook: Codebook, refiners) -> list:
    """Tokenize (class_id, LatentGrid) pairs into teacher-forcing material."""
    out = []
    for class_id, grid in dataset:
        hierarchy = build_hierarchy(grid)
        seq, _ = build_contents(grid, hierarchy, codebook, refiners)
        last = seq.last_stage
        canvases = tuple(accumulate_canvas(seq, i - 1, codebook, refiners).data
                         for i in range(last + 1))
        target = accumulate_canvas(seq, last, codebook, refiners).data
        struct_embs = tuple(embed_structure_map(seq.stages[i][1], last)
                            for i in range(last + 1))
        flow_target = embed_structure_map(seq.stages[last][1], last).astype(np.float32)
        out.append(TokenizedExample(class_id, grid, seq, canvases, target,
                                    struct_embs, flow_target))
    return out


@dataclass(eq=False)
class TrainResult:
    losses: list = field(default_factory=list)
    null_masks: list = field(default_factory=list)
    stats: dict = field(default_factory=dict)


def train_content(examples: list, model: ContentModel, config: TrainConfig) -> TrainResult:
    """Teacher-forced training of the content generator.

    Each step samples examples with replacement and one stage per example;
    the configured fraction of samples swaps in the null class embedding.
    """
    if not examples:
        raise InvariantError("no training examples")
    last = examples[0].sequence.last_stage
    null_id = model.config.null_class_id
    rng = np.random.default_rng(config.seed)
    opt = Adam(model.params())
    result = TrainResult()
    for step in range(config.steps):
        idx = rng.integers(0, len(examples), size=config.batch_size)
        stages = rng.integers(0, last + 1, size=config.batch_size)
        null_mask = rng.random(config.batch_size) < config.null_rate
        batch = []
        for b in range(config.batch_size):
            ex = examples[int(idx[b])]
            stage = int(stages[b])
            tokens, smap = ex.sequence.stages[stage]
            batch.append(ContentBatch(
                class_id=null_id if null_mask[b] else ex.class_id,
                stage=stage,
                canvas=ex.canvases[stage],
                struct_emb=ex.struct_embs[stage],
                smap=smap,
                target_canvas=ex.target_canvas,
                target_tokens=tokens.indices,
            ))
        loss, _ = model.loss(batch, train=True, rng=rng)
        value = float(loss.data)
        if not np.isfinite(value):
            raise NumericError(f"content training diverged at step {step} (loss {value})")
        opt.zero_grad()
        loss.backward()
        opt.step(_batch_lr(step, config))
        result.losses.append(value)
        result.null_masks.append(null_mask)
    return result


def train_structure(examples: list, model: StructureModel, config: TrainConfig) -> TrainResult:
    """Velocity-matching training of the structure generator.

    Per sample: a stage uniform in [1, K-1], a time uniform in [0, 1], fresh
    noise, the clamped noised grid, and a squared error on the velocity
    restricted to the unknown columns.
    """
    if not examples:
        raise InvariantError("no training examples")
    last = examples[0].sequence.last_stage
    if last < 2:
        raise InvariantError("flow training needs at least two splits")
    h, w_grid, e = examples[0].grid.data.shape
    null_id = model.config.null_class_id
    rng = np.random.default_rng(config.seed)
    opt = Adam(model.params())
    result = TrainResult()
    for step in range(config.steps):
        idx = rng.integers(0, len(examples), size=config.batch_size)
        stages = rng.integers(1, last, size=config.batch_size)
        ts = rng.random(config.batch_size)
        null_mask = rng.random(config.batch_size) < config.null_rate
        noise = rng.standard_normal((config.batch_size, h, w_grid, last)).astype(np.float32)

        class_ids = np.empty(config.batch_size, dtype=np.int64)
        zs = np.empty((config.batch_size, h, w_grid, last), dtype=np.float32)
        canvases = np.empty((config.batch_size, h, w_grid, e), dtype=np.float32)
        targets = np.empty_like(zs)
        mask = np.zeros_like(zs)
        for b in range(config.batch_size):
            ex = examples[int(idx[b])]
            stage = int(stages[b])
            known = stage - 1
            state = noised_input(ex.flow_target, float(ts[b]), noise[b], known)
            zs[b] = state.z
            canvases[b] = ex.canvases[stage]
            targets[b] = noise[b] - ex.flow_target
            mask[b, :, :, known:] = 1.0
            class_ids[b] = null_id if null_mask[b] else ex.class_id

        vel = model.velocity(class_ids, stages, canvases, zs, ts, stages - 1,
                             train=True, rng=rng)
        diff = vel - Tensor(targets)
        loss = (diff * diff * mask).sum() / float(mask.sum())
        value = float(loss.data)
        if not np.isfinite(value):
            raise NumericError(f"structure training diverged at step {step} (loss {value})")
        opt.zero_grad()
        loss.backward()
        opt.step(_batch_lr(step, config))
        result.losses.append(value)
        result.null_masks.append(null_mask)
    return result


def structure_eval_loss(examples: list, model: StructureModel, seed: int = 0,
                        samples: int = 32) -> float:
    """Masked velocity error on a fixed seeded evaluation batch."""
    rng = np.random.default_rng(seed)
    last = examples[0].sequence.last_stage
    h, w_grid, _ = examples[0].grid.data.shape
    total = 0.0
    weight = 0.0
    for _ in range(samples):
        ex = examples[int(rng.integers(0, len(examples)))]
        stage = int(rng.integers(1, last))
        t = float(rng.random())
        noise = rng.standard_normal((h, w_grid, last)).astype(np.float32)
        state = noised_input(ex.flow_target, t, noise, stage - 1)
        vel = model.velocity(np.array([ex.class_id]), np.array([stage]),
                             ex.canvases[stage][None], state.z[None],
                             np.array([t]), np.array([stage - 1]))
        target = noise - ex.flow_target
        mask = np.zeros_like(target)
        mask[:, :, stage - 1:] = 1.0
        total += float((((vel.data[0] - target) ** 2) * mask).sum())
        weight += float(mask.sum())
    return total / weight


def evaluate(content_model: ContentModel, structure_model: StructureModel,
             examples: list, codebook: Codebook, refiners, seed: int = 0,
             flow_steps: int = 10) -> dict:
    """Teacher-forced token accuracy per stage, prefix reconstruction error,
    codebook usage and structure bit agreement on unknown columns."""
    last = examples[0].sequence.last_stage
    token_acc = {i: [0, 0] for i in range(last + 1)}
    recon_mse = np.zeros(last + 1, dtype=np.float64)
    used = np.zeros(codebook.size, dtype=bool)
    rng = np.random.default_rng(seed)

    for ex in examples:
        for stage in range(last + 1):
            tokens, smap = ex.sequence.stages[stage]
            used[tokens.indices] = True
            pred = content_model.forward_final_canvas(
                np.array([ex.class_id]), np.array([stage]),
                ex.canvases[stage][None], ex.struct_embs[stage][None])
            logits = content_model.token_logits(pred[0], ex.canvases[stage], smap)
            hits = int((np.argmax(logits.data, axis=1) == tokens.indices).sum())
            token_acc[stage][0] += hits
            token_acc[stage][1] += tokens.indices.size
            prefix = accumulate_canvas(ex.sequence, stage, codebook, refiners).data
            recon_mse[stage] += float(np.mean((prefix - ex.grid.data) ** 2))

    bit_hits = bit_total = 0
    for ex in examples:
        for stage in range(1, last):
            def velocity_fn(z, t, use_null, _stage=stage, _ex=ex):
                out = structure_model.velocity(
                    np.array([_ex.class_id]), np.array([_stage]),
                    _ex.canvases[_stage][None], z[None], np.array([t]),
                    np.array([_stage - 1]))
                return out.data[0]

            pred = flow_sample(velocity_fn, ex.flow_target, stage,
                               n_steps=flow_steps, cfg_scale=1.0, rng=rng)
            unknown = slice(stage - 1, None)
            pred_bits = pred[:, :, unknown] > 1.0
            true_bits = ex.flow_target[:, :, unknown] > 1.0
            bit_hits += int((pred_bits == true_bits).sum())
            bit_total += pred_bits.size

    return {
        "token_accuracy": {i: a / max(t, 1) for i, (a, t) in token_acc.items()},
        "token_accuracy_overall": (sum(a for a, _ in token_acc.values())
                                   / max(sum(t for _, t in token_acc.values()), 1)),
        "reconstruction_mse_by_prefix": (recon_mse / len(examples)).tolist(),
        "codebook_usage": float(used.mean()),
        "structure_bit_accuracy": bit_hits / max(bit_total, 1),
    }
