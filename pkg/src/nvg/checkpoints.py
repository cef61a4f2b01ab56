"""Checkpoint glue: models and refiner stacks to/from the container format."""

from __future__ import annotations

import numpy as np

from .backbone import ModelConfig
from .content_model import ContentModel
from .errors import FormatError
from .io import read_checkpoint, write_checkpoint
from .quantize import Refiner
from .structure_model import StructureModel

__all__ = [
    "save_model", "load_model", "save_refiners", "load_refiners",
]


def _config_meta(config: ModelConfig) -> dict:
    return {
        "kind": config.kind,
        "depth": config.depth,
        "latent_channels": config.latent_channels,
        "codebook_size": config.codebook_size,
        "num_classes": config.num_classes,
        "last_stage": config.last_stage,
        "norm": config.norm,
    }


def save_model(path, model) -> None:
    meta = {"type": "model", **_config_meta(model.config)}
    write_checkpoint(path, meta, model.state_arrays())


def load_model(path):
    meta, arrays = read_checkpoint(path)
    if meta.get("type") != "model":
        raise FormatError(f"checkpoint at {path} is not a model")
    config = ModelConfig(
        depth=int(meta["depth"]),
        kind=meta["kind"],
        latent_channels=int(meta["latent_channels"]),
        codebook_size=int(meta["codebook_size"]),
        num_classes=int(meta["num_classes"]),
        last_stage=int(meta["last_stage"]),
        norm=meta["norm"],
    )
    cls = ContentModel if config.kind == "content" else StructureModel
    model = cls(config, seed=0)
    model.load_state_arrays(arrays)
    return model


def save_refiners(path, refiners) -> None:
    meta = {"type": "refiners", "count": len(refiners),
            "channels": refiners[0].channels if refiners else 0}
    arrays = {}
    for r in refiners:
        arrays[f"refiner{r.stage}.weight"] = r.weight
        arrays[f"refiner{r.stage}.bias"] = r.bias
    write_checkpoint(path, meta, arrays)


def load_refiners(path) -> list:
    meta, arrays = read_checkpoint(path)
    if meta.get("type") != "refiners":
        raise FormatError(f"checkpoint at {path} is not a refiner stack")
    count = int(meta["count"])
    out = []
    for i in range(count):
        try:
            weight = arrays[f"refiner{i}.weight"]
            bias = arrays[f"refiner{i}.bias"]
        except KeyError as exc:
            raise FormatError(f"refiner stack misses stage {i}") from exc
        out.append(Refiner(i, weight.astype(np.float32), bias.astype(np.float32)))
    return out
