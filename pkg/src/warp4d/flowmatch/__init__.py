"""Flow matching on latent grids: velocity network, batches, training and metrics."""

from .batch import FlowBatch, SceneData, ToySpec, from_latent, make_batch, to_latent
from .net import NetConfig, VelocityNet
from .train import (
    FlowModel,
    TrainConfig,
    build_model,
    evaluate_scene,
    predict_scene,
    summarize,
    toy_fm_loss,
    toy_samples,
    train,
    zero_net_baseline,
)

__all__ = [
    "FlowBatch", "FlowModel", "NetConfig", "SceneData", "ToySpec", "TrainConfig", "VelocityNet",
    "build_model", "evaluate_scene", "from_latent", "make_batch", "predict_scene", "summarize",
    "to_latent", "toy_fm_loss", "toy_samples", "train", "zero_net_baseline",
]
