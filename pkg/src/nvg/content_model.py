"""Stage-conditioned transformer that refines the running canvas.

Given the class, the stage and the canvas accumulated so far, the model
predicts the final canvas. The difference between prediction and input
canvas, averaged within each cluster of the stage's structure map, feeds a
linear head that scores every codebook row per cluster.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .backbone import Block, ModelConfig, pad_structure_ids, param_count, rope_tables
from .errors import InvariantError
from .grid import StructureMap

__all__ = ["ContentBatch", "ContentModel", "cfg_logits", "cross_entropy_mean",
           "cluster_mean_matrix"]


@dataclass(frozen=True, eq=False)
class ContentBatch:
    """One teacher-forced training example at a single stage.

    canvas must be the accumulated reconstruction of stages before `stage`;
    target_canvas is the full-depth reconstruction the model should reach.
    """

    class_id: int
    stage: int
    canvas: np.ndarray          # (h, w, e)
    struct_emb: np.ndarray      # (h, w, K) embedding of the stage's map
    smap: StructureMap
    target_canvas: np.ndarray   # (h, w, e)
    target_tokens: np.ndarray   # (2**stage,) codebook indices


def cfg_logits(cond_logits: np.ndarray, uncond_logits: np.ndarray, scale: float) -> np.ndarray:
    """Classifier-free guidance combination: uncond + scale * (cond - uncond)."""
    cond_logits = np.asarray(cond_logits)
    uncond_logits = np.asarray(uncond_logits)
    if cond_logits.shape != uncond_logits.shape:
        raise InvariantError("conditional/unconditional logits must share a shape")
    return uncond_logits + scale * (cond_logits - uncond_logits)


def cluster_mean_matrix(smap: StructureMap, dtype=np.float32) -> np.ndarray:
    """(2**i, h*w) matrix averaging grid locations into their clusters."""
    m = smap.num_clusters
    out = np.zeros((m, smap.labels.size), dtype=dtype)
    out[smap.labels.ravel(), np.arange(smap.labels.size)] = 1.0 / smap.cluster_size
    return out


def cross_entropy_mean(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean cross entropy of (m, n) logits against m integer targets."""
    targets = np.asarray(targets)
    lsm = ad.log_softmax(logits, axis=-1)
    picked = lsm[np.arange(targets.size), targets]
    return -picked.mean()


class ContentModel:
    def __init__(self, config: ModelConfig, seed: int = 0, dtype=np.float32):
        if config.kind != "content":
            raise InvariantError("ContentModel needs a content-kind config")
        self.config = config
        self.dtype = dtype
        rng = np.random.default_rng(seed)
        w = config.width
        e = config.latent_channels
        n = config.codebook_size

        def init(*shape):
            return Tensor((0.02 * rng.standard_normal(shape)).astype(dtype),
                          requires_grad=True)

        def zeros(*shape):
            return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)

        self.class_emb = init(config.num_classes + 1, w)   # last row: null condition
        self.stage_emb = init(config.last_stage + 1, w)
        self.w_in = init(e, w)
        self.b_in = zeros(w)
        self.blocks = [Block(i, w, config.heads, rng, dtype) for i in range(config.depth)]
        self.w_final_mod = zeros(w, 2 * w)
        self.w_head = init(w, e)
        self.b_head = zeros(e)
        self.w_logit = init(e, n)
        self.b_logit = zeros(n)

    # -- parameter access ---------------------------------------------------

    def params(self) -> dict:
        out = {
            "class_emb": self.class_emb,
            "stage_emb": self.stage_emb,
            "w_in": self.w_in,
            "b_in": self.b_in,
            "w_final_mod": self.w_final_mod,
            "w_head": self.w_head,
            "b_head": self.b_head,
            "w_logit": self.w_logit,
            "b_logit": self.b_logit,
        }
        for i, block in enumerate(self.blocks):
            out.update(block.params(f"block{i}"))
        return out

    def core_param_count(self) -> int:
        """Actual block parameter total; must equal param_count(config)."""
        return sum(block.core_param_count() for block in self.blocks)

    def state_arrays(self) -> dict:
        return {k: v.data for k, v in self.params().items()}

    def load_state_arrays(self, arrays: dict):
        params = self.params()
        if set(arrays) != set(params):
            raise InvariantError("checkpoint parameter names do not match the model")
        for k, p in params.items():
            if arrays[k].shape != p.data.shape:
                raise InvariantError(f"checkpoint shape mismatch for {k}")
            p.data = arrays[k].astype(self.dtype)

    # -- forward ------------------------------------------------------------

    def _rope_tables(self, struct_ids: np.ndarray, grid_w: int):
        """cos/sin for [class] + canvas tokens; struct_ids is (B, hw, 8)."""
        b_sz, hw, _ = struct_ids.shape
        yy, xx = np.divmod(np.arange(hw), grid_w)
        kind = np.concatenate([[0], np.ones(hw)])
        spatial = np.concatenate([[[0, 0]], np.stack([yy, xx], axis=1)])
        cos_list, sin_list = [], []
        for b in range(b_sz):
            struct = np.concatenate([np.ones((1, 8), dtype=np.int64), struct_ids[b]])
            cos, sin = rope_tables(kind, struct, spatial, dtype=self.dtype)
            cos_list.append(cos)
            sin_list.append(sin)
        return np.stack(cos_list)[:, None], np.stack(sin_list)[:, None]

    def forward_final_canvas(self, class_ids, stages, canvases, struct_embs,
                             train: bool = False,
                             rng: np.random.Generator | None = None) -> Tensor:
        """Predict the final canvas for a batch.

        class_ids: (B,) ints (null id allowed); stages: (B,) ints;
        canvases: (B, h, w, e); struct_embs: (B, h, w, K) integer embeddings.
        Returns a (B, h, w, e) tensor.
        """
        class_ids = np.asarray(class_ids)
        stages = np.asarray(stages)
        canvases = np.asarray(canvases, dtype=self.dtype)
        struct_embs = np.asarray(struct_embs)
        b_sz, h, w_grid, e = canvases.shape
        if e != self.config.latent_channels:
            raise InvariantError(f"canvas has {e} channels, model expects "
                                 f"{self.config.latent_channels}")
        if class_ids.max(initial=0) > self.config.null_class_id:
            raise InvariantError("class id out of range")
        hw = h * w_grid
        struct_ids = pad_structure_ids(struct_embs.reshape(b_sz, hw, -1))
        cos, sin = self._rope_tables(struct_ids, w_grid)

        cls = ad.rows(self.class_emb, class_ids)                       # (B, w)
        cond = cls + ad.rows(self.stage_emb, stages)
        tok = ad.matmul(Tensor(canvases.reshape(b_sz, hw, e)), self.w_in) + self.b_in
        x = ad.concat([ad.reshape(cls, (b_sz, 1, self.config.width)), tok], axis=1)
        for block in self.blocks:
            x = block.forward(x, cos, sin, cond, train=train,
                              dropout=self.config.dropout, rng=rng)
        fmod = ad.reshape(ad.matmul(ad.silu(cond), self.w_final_mod),
                          (b_sz, 1, 2 * self.config.width))
        fscale = fmod[:, :, :self.config.width]
        fshift = fmod[:, :, self.config.width:]
        x = ad.rmsnorm(x) * (1.0 + fscale) + fshift
        # residual parameterization: the head emits what is still missing from
        # the input canvas, and the sum is the predicted final canvas
        delta = ad.matmul(x[:, 1:, :], self.w_head) + self.b_head      # (B, hw, e)
        pred = ad.reshape(delta, (b_sz, h, w_grid, e)) + Tensor(canvases)
        return pred

    def token_logits(self, pred_final, canvas, smap: StructureMap) -> Tensor:
        """Per-cluster logits over the codebook from one sample's canvases.

        diff = predicted final canvas minus input canvas; cluster means of
        diff go through the shared linear head. Shape (2**i, n).
        """
        pred = pred_final if isinstance(pred_final, Tensor) else Tensor(np.asarray(pred_final, self.dtype))
        canvas = np.asarray(canvas, dtype=self.dtype)
        hw = smap.labels.size
        e = self.config.latent_channels
        diff = ad.reshape(pred - canvas, (hw, e))
        means = ad.matmul(Tensor(cluster_mean_matrix(smap, self.dtype)), diff)
        return ad.matmul(means, self.w_logit) + self.b_logit

    def loss(self, batch: list, train: bool = False,
             rng: np.random.Generator | None = None):
        """Mean of Eq-style per-sample losses: canvas MSE + token CE.

        Returns (loss Tensor, stats dict).
        """
        if not batch:
            raise InvariantError("empty batch")
        class_ids = np.array([item.class_id for item in batch])
        stages = np.array([item.stage for item in batch])
        canvases = np.stack([item.canvas for item in batch])
        struct_embs = np.stack([item.struct_emb for item in batch])
        targets = np.stack([item.target_canvas for item in batch]).astype(self.dtype)

        pred = self.forward_final_canvas(class_ids, stages, canvases, struct_embs,
                                         train=train, rng=rng)
        err = pred - targets
        mse = (err * err).mean()
        ce_terms = []
        correct = 0
        total = 0
        for b, item in enumerate(batch):
            logits = self.token_logits(pred[b], item.canvas, item.smap)
            ce_terms.append(cross_entropy_mean(logits, item.target_tokens))
            pred_tok = np.argmax(logits.data, axis=1)
            correct += int((pred_tok == item.target_tokens).sum())
            total += len(item.target_tokens)
        ce = ce_terms[0]
        for term in ce_terms[1:]:
            ce = ce + term
        ce = ce * (1.0 / len(ce_terms))
        loss = mse + ce
        stats = {
            "mse": float(mse.data),
            "ce": float(ce.data),
            "token_accuracy": correct / max(total, 1),
        }
        return loss, stats


def content_loss(model: ContentModel, batch: list, train: bool = False,
                 rng: np.random.Generator | None = None):
    """Module-level alias of ContentModel.loss."""
    return model.loss(batch, train=train, rng=rng)


def build_content_model(depth: int, latent_channels: int, codebook_size: int,
                        num_classes: int, last_stage: int, seed: int = 0,
                        dtype=np.float32) -> ContentModel:
    config = ModelConfig(depth=depth, kind="content", latent_channels=latent_channels,
                         codebook_size=codebook_size, num_classes=num_classes,
                         last_stage=last_stage)
    model = ContentModel(config, seed=seed, dtype=dtype)
    assert model.core_param_count() == param_count(config)
    return model
