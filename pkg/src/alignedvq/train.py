"""Two-stage training recipe.

Stage one trains the toy encoder on the synthetic task. Stage two attaches an
aligned-VQ module at a partition point and fine-tunes: codebooks are seeded by
k-means on a warm-up pass and refined online by moving averages, while the
projections and head adapter learn by gradient under

    total = task_loss + beta * commitment

with gradients reaching the pre-quantization side through the straight-through
estimator. The backbone is frozen by default.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Var
from .data import SyntheticDataset
from .dlp import AlignedVQModule
from .encoder import PartitionSpec, VisionEncoder
from .vq import CodebookTrainer, VQConfig, fit_residual_grouped

PARAM_GROUPS = ("backbone", "dlp", "adapter", "codebook")


class TrainConfigError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; carries the partial report."""

    def __init__(self, message, report):
        super().__init__(message)
        self.report = report


@dataclass(frozen=True)
class TrainConfig:
    beta: float = 0.25
    lr: float = 3e-4
    epochs: int = 15
    batch_size: int = 64
    seed: int = 0
    ema_gamma: float = 0.99
    laplace_eps: float = 1e-5
    freeze: frozenset = frozenset()
    adapter_rank: int = 4
    adapter_alpha: float = 8.0
    kmeans_iters: int = 25
    warmup_budget: int = 65536
    dead_after: int = 100

    def __post_init__(self):
        if self.beta < 0:
            raise TrainConfigError("beta must be non-negative")
        unknown = set(self.freeze) - set(PARAM_GROUPS)
        if unknown:
            raise TrainConfigError(f"unknown freeze groups: {sorted(unknown)}")


@dataclass
class TrainReport:
    """Per-epoch trajectory. Column order is the CSV contract."""

    task_loss: list = field(default_factory=list)
    commit_loss: list = field(default_factory=list)
    perplexity: list = field(default_factory=list)
    val_accuracy: list = field(default_factory=list)

    CSV_COLUMNS = ("epoch", "task_loss", "commit_loss", "perplexity", "val_accuracy")

    def append(self, task, commit, perplexity, val_acc):
        self.task_loss.append(task)
        self.commit_loss.append(commit)
        self.perplexity.append(perplexity)
        self.val_accuracy.append(val_acc)

    def __len__(self):
        return len(self.task_loss)

    def to_csv(self) -> str:
        out = io.StringIO()
        out.write(",".join(self.CSV_COLUMNS) + "\n")
        for i in range(len(self)):
            out.write(f"{i},{self.task_loss[i]:.6f},{self.commit_loss[i]:.6f},"
                      f"{self.perplexity[i]:.4f},{self.val_accuracy[i]:.4f}\n")
        return out.getvalue()

    def table(self) -> str:
        lines = [f"{'epoch':>5} {'task_loss':>10} {'commit':>10} {'perplex':>8} {'val_acc':>8}"]
        for i in range(len(self)):
            lines.append(f"{i:>5} {self.task_loss[i]:>10.4f} {self.commit_loss[i]:>10.4f} "
                         f"{self.perplexity[i]:>8.2f} {self.val_accuracy[i]:>8.4f}")
        return "\n".join(lines)


class Adam:
    """Standard Adam over a fixed, ordered parameter list."""

    def __init__(self, params: list[Var], lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]
        self.t = 0

    def step(self):
        self.t += 1
        correct1 = 1.0 - self.beta1 ** self.t
        correct2 = 1.0 - self.beta2 ** self.t
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad
            self.m[i] = self.beta1 * self.m[i] + (1 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1 - self.beta2) * (g * g)
            m_hat = self.m[i] / correct1
            v_hat = self.v[i] / correct2
            p.value = (p.value - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(
                p.value.dtype)

    def zero_grad(self):
        for p in self.params:
            p.grad = None


def _batches(indices: np.ndarray, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(indices)
    for start in range(0, len(order), batch_size):
        chunk = order[start:start + batch_size]
        if len(chunk):
            yield chunk


def evaluate(model: VisionEncoder, dataset: SyntheticDataset,
             partition: PartitionSpec | None = None,
             vq_module: AlignedVQModule | None = None,
             split: str = "val", batch_size: int = 256) -> float:
    """Top-1 accuracy; pure (bit-identical across calls)."""
    images, labels = dataset.val if split == "val" else dataset.train
    correct = 0
    with ad.no_grad():
        for start in range(0, len(labels), batch_size):
            imgs = images[start:start + batch_size]
            result = model.forward(imgs, partition, vq_module)
            pred = np.argmax(result.logits.value, axis=1)
            correct += int(np.sum(pred == labels[start:start + batch_size]))
    return correct / len(labels)


def train_baseline(model: VisionEncoder, dataset: SyntheticDataset,
                   cfg: TrainConfig) -> TrainReport:
    """Supervised training of the plain encoder (no quantizer attached)."""
    rng = np.random.default_rng(cfg.seed)
    optimizer = Adam(model.backbone_params(), lr=cfg.lr)
    report = TrainReport()
    train_imgs, train_labels_all = dataset.images, dataset.labels
    for _ in range(cfg.epochs):
        losses = []
        for batch_idx in _batches(dataset.train_idx, cfg.batch_size, rng):
            result = model.forward(train_imgs[batch_idx])
            loss = ad.cross_entropy(result.logits, train_labels_all[batch_idx])
            value = float(loss.value)
            if not math.isfinite(value):
                report.append(value, 0.0, 0.0, float("nan"))
                raise TrainingDiverged("task loss became non-finite", report)
            ad.backward(loss)
            optimizer.step()
            optimizer.zero_grad()
            losses.append(value)
        report.append(float(np.mean(losses)), 0.0, 0.0, evaluate(model, dataset))
    return report


def _index_perplexity(counts: np.ndarray) -> float:
    total = counts.sum()
    if total == 0:
        return 0.0
    p = counts[counts > 0] / total
    return float(np.exp(-np.sum(p * np.log(p))))


def warmup_features(model: VisionEncoder, dataset: SyntheticDataset,
                    partition: PartitionSpec, budget: int, batch_size: int = 256) -> np.ndarray:
    """Tap tensors from a forward pass over the training split, flattened to
    token vectors, truncated to the sample budget."""
    collected = []
    seen = 0
    for start in range(0, len(dataset.train_idx), batch_size):
        idx = dataset.train_idx[start:start + batch_size]
        feats = model.tap_features(dataset.images[idx], partition)
        flat = feats.reshape(-1, feats.shape[-1])
        collected.append(flat)
        seen += flat.shape[0]
        if seen >= budget:
            break
    return np.concatenate(collected)[:budget]


def init_codebooks(model: VisionEncoder, dataset: SyntheticDataset,
                   partition: PartitionSpec, vq_config: VQConfig,
                   cfg: TrainConfig) -> list:
    samples = warmup_features(model, dataset, partition, cfg.warmup_budget)
    return fit_residual_grouped(samples, vq_config, seed=cfg.seed, iters=cfg.kmeans_iters)


def finetune_alignedvq(model: VisionEncoder, partition: PartitionSpec,
                       vq_config: VQConfig, dataset: SyntheticDataset,
                       cfg: TrainConfig, use_dlp: bool = True,
                       use_adapter: bool = True) -> tuple[AlignedVQModule, TrainReport]:
    """Attach an aligned-VQ module at the partition and fine-tune.

    The freeze set names parameter groups excluded from updates; the default
    config freezes nothing, so pass freeze={"backbone"} for the standard
    recipe. With use_dlp=False the projections stay gated shut (plain VQ);
    with use_adapter=False no head adapter is added.
    """
    partition.check(model.cfg.depth)
    module = AlignedVQModule.initialize(vq_config, seed=cfg.seed,
                                        codebooks=init_codebooks(model, dataset, partition,
                                                                 vq_config, cfg))
    if use_adapter and "adapter" not in cfg.freeze and model.adapter is None:
        model.add_adapter(rank=cfg.adapter_rank, alpha=cfg.adapter_alpha, seed=cfg.seed)

    trainable: list[Var] = []
    if "backbone" not in cfg.freeze:
        trainable += model.backbone_params()
    if use_dlp and "dlp" not in cfg.freeze:
        trainable += list(module.dlp.named().values())
    if use_adapter and "adapter" not in cfg.freeze and model.adapter is not None:
        trainable += list(model.adapter.named().values())
    optimizer = Adam(trainable, lr=cfg.lr)
    update_codebooks = "codebook" not in cfg.freeze
    cb_trainers = [CodebookTrainer(cb, cfg.ema_gamma, cfg.laplace_eps, cfg.dead_after,
                                   seed=cfg.seed + 31 * i)
                   for i, cb in enumerate(module.codebooks)]

    rng = np.random.default_rng(cfg.seed)
    report = TrainReport()
    g = vq_config.num_groups
    for _ in range(cfg.epochs):
        task_losses, commit_losses = [], []
        counts = [np.zeros(vq_config.entries, dtype=np.int64) for _ in module.codebooks]
        for batch_idx in _batches(dataset.train_idx, cfg.batch_size, rng):
            result = model.forward(dataset.images[batch_idx], partition, module,
                                   want_stage_inputs=True)
            task = ad.cross_entropy(result.logits, dataset.labels[batch_idx])
            total = ad.add(task, ad.mul_scalar(result.commit, cfg.beta))
            task_value, commit_value = float(task.value), float(result.commit.value)
            if not (math.isfinite(task_value) and math.isfinite(commit_value)):
                report.append(task_value, commit_value, 0.0, float("nan"))
                raise TrainingDiverged("fine-tuning loss became non-finite", report)
            if trainable:
                ad.backward(total)
                optimizer.step()
                optimizer.zero_grad()
            grid = result.indices
            for (s, q), stage_in in result.stage_inputs.items():
                pos = s * g + q
                idx = grid[:, :, s, q].ravel()
                if update_codebooks:
                    cb_trainers[pos].update(stage_in, idx)
                counts[pos] += np.bincount(idx, minlength=vq_config.entries)
            task_losses.append(task_value)
            commit_losses.append(commit_value)
        perplexity = float(np.mean([_index_perplexity(c) for c in counts]))
        report.append(float(np.mean(task_losses)), float(np.mean(commit_losses)),
                      perplexity, evaluate(model, dataset, partition, module))
    return module, report
