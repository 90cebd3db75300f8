"""Weak-label dataset building and micro-CNN training."""

import logging
from pathlib import Path
from typing import Literal

from pydantic import BaseModel, Field

from app.commands import output_dir
from app.config import settings
from app.engine.grading import (
    PatchDatasetBuilder,
    load_manifest,
    load_patch_dataset,
    plan_dataset,
    save_patch_dataset,
)
from app.models.network import ConvBlock, NetworkConfig, TrainConfig
from app.services.cnn import accuracy, build_network, prepare_patches, save_weights, train, write_loss_log

logger = logging.getLogger(__name__)

DROPOUT_P = 0.75


class DatasetRequest(BaseModel):
    manifest: str
    out: str | None = None
    patches: int = Field(default_factory=lambda: settings.patches_per_slide, ge=1)
    size: int = Field(default_factory=lambda: settings.patch_size, ge=4)
    seed: int = 0
    k: int = Field(default_factory=lambda: settings.kmeans_k)
    lam: float = Field(default_factory=lambda: settings.stain_lambda, gt=0)


class TrainRequest(BaseModel):
    dataset: str
    out: str | None = None
    iters: int = Field(default=1000, ge=0)
    lr: float = Field(default=0.01, ge=0)
    batch: int = Field(default=100, ge=1)
    seed: int = 0
    loss: Literal["mse", "xent"] = "mse"
    channels: list[int] | None = None
    fc: list[int] | None = None
    dropout: dict[int, float] | None = None


def run_dataset(body: DatasetRequest) -> dict:
    """Sample hematoxylin patches from every training slide of a manifest."""
    manifest = load_manifest(body.manifest)
    plan = plan_dataset(manifest)
    out = output_dir(body.out, "dataset")
    builder = PatchDatasetBuilder(
        Path(body.manifest).parent, n_per_slide=body.patches, patch_size=body.size,
        seed=body.seed, k=body.k, lam=body.lam,
    )
    dataset = builder.build(manifest)
    save_patch_dataset(dataset, out)
    return {
        "status": "complete",
        "out": str(out),
        "plan": plan.summary(),
        "n_patches": len(dataset),
        "class_counts": {str(k): v for k, v in dataset.class_counts().items()},
        "skipped": dataset.skipped,
    }


def network_config(body: TrainRequest, input_size: int) -> NetworkConfig:
    """Architecture for the patch size of the dataset.

    A custom layer stack without explicit dropout drops on its last two
    hidden layers.
    """
    fields: dict = {"input_size": input_size, "loss": body.loss}
    if body.channels is not None:
        fields["conv_blocks"] = [ConvBlock(kernel=3, channels=c) for c in body.channels]
    if body.fc is not None:
        fields["fc_sizes"] = body.fc
    if body.dropout is not None:
        fields["dropout"] = body.dropout
    elif body.channels is not None or body.fc is not None:
        n_hidden = len(fields.get("conv_blocks", NetworkConfig().conv_blocks)) \
            + len(fields.get("fc_sizes", NetworkConfig().fc_sizes))
        fields["dropout"] = {layer: DROPOUT_P for layer in (n_hidden - 1, n_hidden) if layer >= 1}
    return NetworkConfig(**fields)


def run_train(body: TrainRequest) -> dict:
    """Train from a seeded initialization and write weights plus the loss log."""
    dataset = load_patch_dataset(body.dataset)
    out = output_dir(body.out, "train")
    config = network_config(body, int(dataset.patches.shape[-1]))
    network = build_network(config, seed=body.seed)
    x = prepare_patches(dataset.patches)
    trained, history = train(
        network, x, dataset.labels,
        TrainConfig(batch_size=body.batch, learning_rate=body.lr, iterations=body.iters, seed=body.seed),
    )
    save_weights(trained, out / "weights.bin")
    write_loss_log(history, out / "loss.csv")
    train_accuracy = accuracy(trained, x, dataset.labels)
    logger.info("Trained %d iterations — final loss %s, training accuracy %.4f",
                body.iters, f"{history[-1]:.6f}" if history else "n/a", train_accuracy)
    return {
        "status": "complete",
        "weights": str(out / "weights.bin"),
        "loss_log": str(out / "loss.csv"),
        "iterations": body.iters,
        "n_parameters": trained.n_parameters,
        "final_loss": round(history[-1], 10) if history else None,
        "train_accuracy": round(train_accuracy, 6),
    }
