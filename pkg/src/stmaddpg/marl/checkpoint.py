"""Versioned checkpoint files for trained pairs (numpy ``.npz`` container)."""
from __future__ import annotations

import io
import json
import os
import zipfile

import numpy as np

from ..diffcore import Layout, ParameterVector
from .core import ActorCriticBundle
from .trainer import TrainedPair, TrainerConfig

__all__ = ["FORMAT_VERSION", "CheckpointError", "save_pair", "load_pair"]

FORMAT_VERSION = 1
MAGIC = "stmaddpg-checkpoint"


class CheckpointError(ValueError):
    pass


def save_pair(pair: TrainedPair, path) -> None:
    b = pair.bundle
    meta = {
        "magic": MAGIC,
        "version": FORMAT_VERSION,
        "layout": b.layout.to_dict(),
        "bundle": b.config(),
        "trainer": pair.config.to_dict(),
        "env_name": pair.env_name,
        "total_steps": pair.total_steps,
        "cg_fallbacks": b.cg_fallbacks,
    }
    buf = io.BytesIO()
    np.savez(buf, meta=np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8),
             live=b.live.values, target=b.target.values)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(buf.getvalue())
    os.replace(tmp, path)


def load_pair(path) -> TrainedPair:
    try:
        with np.load(path, allow_pickle=False) as data:
            meta = json.loads(bytes(data["meta"]).decode())
            live = np.array(data["live"])
            target = np.array(data["target"])
    except (zipfile.BadZipFile, OSError, KeyError, ValueError, EOFError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    if meta.get("magic") != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint file")
    if meta.get("version") != FORMAT_VERSION:
        raise CheckpointError(f"checkpoint version {meta.get('version')} is not supported "
                              f"(expected {FORMAT_VERSION})")
    bc = meta["bundle"]
    bundle = ActorCriticBundle(bc["obs_dim"], bc["act_dims"], bc["action_bounds"], bc["actor_hidden"],
                               bc["critic_hidden"], bc["critic_activation"], bc["tau"], bc["gamma"])
    layout = Layout.from_dict(meta["layout"])
    if layout != bundle.layout:
        raise CheckpointError("checkpoint layout does not match its network configuration")
    if live.size != layout.size or target.size != layout.size:
        raise CheckpointError("checkpoint parameter arrays have the wrong size")
    bundle.live = ParameterVector(bundle.layout, live)
    bundle.target = ParameterVector(bundle.layout, target)
    bundle.cg_fallbacks = int(meta.get("cg_fallbacks", 0))
    return TrainedPair(bundle, TrainerConfig.from_dict(meta["trainer"]), meta.get("env_name"),
                       total_steps=int(meta.get("total_steps", 0)))
