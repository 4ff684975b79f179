"""Shared fixtures for the acceptance suite.

Training-based criteria share one synthetic dataset and one pool of trained
baseline checkpoints (five seeds) so the multi-seed comparisons are paired and
the suite stays inside its time budget. Models are reloaded from checkpoint
files for every fine-tuning variant because fine-tuning mutates the model.
"""

import pytest

from alignedvq.containers import load_checkpoint, save_checkpoint
from alignedvq.data import DataConfig, generate
from alignedvq.encoder import ModelConfig, VisionEncoder
from alignedvq.train import TrainConfig, evaluate, train_baseline

ACCEPTANCE_SEEDS = (0, 1, 2, 3, 4)


def acceptance_model_config(seed):
    # post-norm ablation variant: every LN tap carries the complete stream, so
    # insertion-location comparisons measure quantization friendliness alone
    return ModelConfig(variant="post_norm", seed=seed)


def baseline_train_config(seed):
    return TrainConfig(epochs=8, lr=3e-4, batch_size=64, seed=seed, kmeans_iters=15)


@pytest.fixture(scope="session")
def acceptance_dataset():
    return generate(DataConfig(num_classes=10, samples_per_class=150,
                               noise_sigma=0.35, seed=1234))


@pytest.fixture(scope="session")
def trained_baselines(acceptance_dataset, tmp_path_factory):
    """{seed: (checkpoint path, baseline val accuracy)} for five seeds."""
    root = tmp_path_factory.mktemp("baselines")
    out = {}
    for seed in ACCEPTANCE_SEEDS:
        model = VisionEncoder(acceptance_model_config(seed))
        train_baseline(model, acceptance_dataset, baseline_train_config(seed))
        path = root / f"baseline_{seed}.avq"
        save_checkpoint(path, model)
        out[seed] = (path, evaluate(model, acceptance_dataset))
    return out


def reload_baseline(trained_baselines, seed):
    return load_checkpoint(trained_baselines[seed][0]).model
