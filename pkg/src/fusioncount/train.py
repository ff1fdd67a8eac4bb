"""Adam and the toy training loop on synthetic scenes."""
import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from . import data
from .model import FusionCount, ModelConfig

log = logging.getLogger(__name__)

PRESETS = {
    # patch size, scene size, head-count range
    "toy": ((96, 128), (128, 176), (5, 40)),
    "paper": ((384, 512), (480, 640), (50, 300)),
}


@dataclass
class TrainConfig:
    lr: float = 1e-5
    batch_size: int = 2
    patch_hw: tuple = (384, 512)
    iterations: int = 300
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    n_scenes: int = 20
    scene_hw: tuple = (480, 640)
    count_range: tuple = (50, 300)

    def __post_init__(self):
        for v in (*self.patch_hw, *self.scene_hw):
            if v % 16:
                raise ValueError(f"patch and scene sizes must be multiples of 16, got {v}")
        if self.patch_hw[0] > self.scene_hw[0] or self.patch_hw[1] > self.scene_hw[1]:
            raise ValueError("patch larger than scene")

    @classmethod
    def preset(cls, name, **overrides):
        patch, scene, counts = PRESETS[name]
        kw = dict(patch_hw=patch, scene_hw=scene, count_range=counts)
        kw.update(overrides)
        return cls(**kw)


@dataclass
class AdamState:
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, grads, state, config):
    """One bias-corrected Adam update, applied in place; returns ``params``."""
    state.t += 1
    b1, b2 = config.beta1, config.beta2
    c1 = 1 - b1 ** state.t
    c2 = 1 - b2 ** state.t
    for name, p in params.items():
        g = grads[name].astype(p.dtype, copy=False)
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        denom = v / c2
        np.sqrt(denom, out=denom)
        denom += config.eps
        step = m / denom
        step *= config.lr / c1
        p -= step
    return params


@dataclass
class TrainResult:
    model: FusionCount
    history: list            # per iteration: (iteration, batch loss, batch MAE)
    initial: dict            # loss/MAE/RMSE over the training scenes before training
    final: dict              # ... and after the last update


def make_scenes(config):
    return [data.generate_scene(config.seed * 1000 + i, config.count_range, *config.scene_hw)
            for i in range(config.n_scenes)]


def dataset_metrics(model, scenes):
    """Loss, MAE and RMSE of the model over whole scenes."""
    losses, pred, gt = [], [], []
    for s in scenes:
        d = model.forward(data.normalize_image(s.image), keep_cache=False)
        losses.append(data.loss(d, s.density_gt)[0])
        pred.append(float(d.sum()))
        gt.append(float(s.density_gt.sum()))
    mae, rmse = data.count_errors(pred, gt)
    return {"loss": float(np.mean(losses)), "mae": mae, "rmse": rmse}


def train_toy(config, model_config=None, callback=None):
    """Train a freshly initialised model on ``config.n_scenes`` synthetic scenes.

    Each iteration picks one scene and crops ``batch_size`` patches from it.
    Fully determined by ``config.seed``.
    """
    model_config = model_config or ModelConfig(seed=config.seed)
    model = FusionCount(model_config)
    scenes = make_scenes(config)
    rng = np.random.default_rng(config.seed)
    state = AdamState()

    initial = dataset_metrics(model, scenes)
    log.info("iteration 0: loss %.4f  MAE %.2f", initial["loss"], initial["mae"])
    history = []
    for it in range(config.iterations):
        scene = scenes[int(rng.integers(len(scenes)))]
        patches = data.crop_patches(scene, config.batch_size, config.patch_hw, rng)
        images = np.concatenate([data.normalize_image(p[0]) for p in patches])
        target = np.concatenate([p[1] for p in patches])
        pred = model.forward(images)
        value, grad = data.loss(pred, target)
        mae, _ = data.count_errors(pred.sum(axis=(1, 2, 3)), target.sum(axis=(1, 2, 3)))
        history.append((it, value, mae))
        adam_step(model.params, model.backward(grad), state, config)
        if callback is not None:
            callback(it, value, mae)
    final = dataset_metrics(model, scenes)
    log.info("iteration %d: loss %.4f  MAE %.2f", config.iterations, final["loss"], final["mae"])
    return TrainResult(model, history, initial, final)


def write_history(path, history):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "loss", "train_mae"])
        for it, value, mae in history:
            w.writerow([it, repr(value), repr(mae)])
