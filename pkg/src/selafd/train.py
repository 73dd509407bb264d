"""Training loop: cross-entropy objective, Adam over exactly the trainable
set, per-epoch cosine-annealed learning rate, seeded batching, and
best-by-test-accuracy checkpoint retention.

Everything downstream of the seed is deterministic: two runs with the same
config produce bit-identical epoch logs and checkpoint bytes. Wall-clock
time is therefore reported out of band (TrainResult.wall_ms), never in the
epoch log.
"""

from __future__ import annotations

import dataclasses
import math
import time
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, InputError, NumericalAbort
from .peft import SelafdModel, count_trainable
from .radar import DatasetSplit
from .tensor import Tensor


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 128
    epochs: int = 200
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    eta_min: float = 0.0
    seed: int = 0
    eval_every: int = 1

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigurationError(f"lr must be positive, got {self.lr}")
        if self.batch_size < 1:
            raise ConfigurationError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ConfigurationError(f"epochs must be >= 1, got {self.epochs}")
        if self.eval_every < 1:
            raise ConfigurationError(f"eval_every must be >= 1, got {self.eval_every}")

    def echo_lines(self) -> list[str]:
        return [f"{k}={v!r}" for k, v in dataclasses.asdict(self).items()]


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label], via log-sum-exp."""
    single = logits.ndim == 1
    x = logits.data[None, :] if single else logits.data
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    b, c = x.shape
    if y.shape != (b,):
        raise InputError(f"{y.size} labels for {b} logit rows")
    if y.size and (y.min() < 0 or y.max() >= c):
        raise InputError(f"label out of range [0,{c}): {y[(y < 0) | (y >= c)][0]}")

    m = x.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(x - m).sum(axis=1))
    losses = lse - x[np.arange(b), y]
    data = np.asarray(losses.mean())

    def bwd(g: np.ndarray):
        p = np.exp(x - m)
        p /= p.sum(axis=1, keepdims=True)
        p[np.arange(b), y] -= 1.0
        gx = p * (float(g) / b)
        return (gx[0] if single else gx,)

    return T._result(data, "cross_entropy", (logits,), bwd)


def cosine_lr(step: int, total_steps: int, lr0: float, eta_min: float = 0.0) -> float:
    """eta_min + 0.5 * (lr0 - eta_min) * (1 + cos(pi * step / total))."""
    if not 0 <= step <= total_steps:
        raise InputError(f"step {step} outside [0, {total_steps}]")
    return eta_min + 0.5 * (lr0 - eta_min) * (1.0 + math.cos(math.pi * step / total_steps))


class AdamState:
    """First/second moment buffers for exactly the given parameters."""

    def __init__(self, params: dict[str, Tensor], beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0


def adam_step(params: dict[str, Tensor], state: AdamState, lr: float) -> None:
    """One bias-corrected Adam update; a missing gradient counts as zero."""
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


# ---------------------------------------------------------------------------
# the loop
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    model: SelafdModel
    log_lines: list[str]
    lr_trace: list[float]
    best_state: dict[str, np.ndarray]
    best_epoch: int
    best_test_acc: float
    split_hash: str
    wall_ms: float


def _predict(model: SelafdModel, dataset, indices, batch_size: int) -> np.ndarray:
    """Argmax class per sample; ties resolve to the lower class index."""
    preds = np.empty(len(indices), dtype=np.int64)
    for lo in range(0, len(indices), batch_size):
        chunk = indices[lo:lo + batch_size]
        imgs = np.stack([dataset[i].image for i in chunk])
        preds[lo:lo + len(chunk)] = model.classify(imgs).data.argmax(axis=1)
    return preds


def accuracy(model: SelafdModel, dataset, indices, batch_size: int = 128) -> float:
    truth = np.array([dataset[i].label_index for i in indices])
    return float(np.mean(_predict(model, dataset, list(indices), batch_size) == truth))


def _fmt(x: float) -> str:
    return repr(float(x))


def train(model: SelafdModel, dataset, split_: DatasetSplit,
          config: TrainConfig) -> TrainResult:
    """Run the loop. Deterministic given (model weights, dataset, split,
    config): fixed shuffle order, fixed schedule, fixed logging."""
    t_start = time.perf_counter()
    train_idx = list(split_.train_idx)
    test_idx = list(split_.test_idx)
    if not train_idx or not test_idx:
        raise InputError("empty train or test split")

    params = dict(model.trainable_parameters())
    state = AdamState(params, config.beta1, config.beta2, config.eps)
    rng = np.random.default_rng(np.random.PCG64(config.seed))

    batch = min(config.batch_size, len(train_idx))
    log: list[str] = ["# train config", f"mode={model.mode}"]
    log += config.echo_lines()
    log += [f"split_hash={split_.hash()}",
            f"samples_train={len(train_idx)}",
            f"samples_test={len(test_idx)}",
            f"trainable={count_trainable(model)['trainable']}"]
    if batch < config.batch_size:
        log.append(f"# batch_size reduced to {batch}: "
                   f"train split smaller than configured {config.batch_size}")
    log.append("# epoch lr train_loss train_acc test_acc")

    lr_trace: list[float] = []
    best_state: dict[str, np.ndarray] = {}
    best_epoch = -1
    best_acc = -1.0
    step = 0
    for epoch in range(config.epochs):
        lr = cosine_lr(epoch, config.epochs, config.lr, config.eta_min)
        lr_trace.append(lr)
        order = rng.permutation(len(train_idx))
        loss_sum = 0.0
        hit = 0
        for lo in range(0, len(order), batch):
            chunk = [train_idx[i] for i in order[lo:lo + batch]]
            imgs = np.stack([dataset[i].image for i in chunk])
            labels = np.array([dataset[i].label_index for i in chunk])
            logits = model.classify(imgs)
            loss = cross_entropy(logits, labels)
            if not np.isfinite(loss.data):
                ids = ",".join(dataset[i].sample_id for i in chunk)
                raise NumericalAbort(
                    f"non-finite loss at epoch {epoch + 1}, batch step {step} "
                    f"(samples: {ids})", batch_id=step)
            for p in params.values():
                p.zero_grad()
            T.backward(loss)
            adam_step(params, state, lr)
            loss_sum += float(loss.data) * len(chunk)
            hit += int((logits.data.argmax(axis=1) == labels).sum())
            step += 1

        train_loss = loss_sum / len(train_idx)
        train_acc = hit / len(train_idx)
        is_eval = (epoch + 1) % config.eval_every == 0 or epoch == config.epochs - 1
        if is_eval:
            test_acc = accuracy(model, dataset, test_idx, batch)
            if test_acc > best_acc:
                best_acc = test_acc
                best_epoch = epoch + 1
                best_state = {k: p.data.copy() for k, p in model.named_parameters()}
            test_col = _fmt(test_acc)
        else:
            test_col = "-"
        log.append(f"{epoch + 1} {_fmt(lr)} {_fmt(train_loss)} "
                   f"{_fmt(train_acc)} {test_col}")

    wall_ms = (time.perf_counter() - t_start) * 1000.0
    return TrainResult(model=model, log_lines=log, lr_trace=lr_trace,
                       best_state=best_state, best_epoch=best_epoch,
                       best_test_acc=best_acc, split_hash=split_.hash(),
                       wall_ms=wall_ms)


# ---------------------------------------------------------------------------
# synthetic backbone pretraining
# ---------------------------------------------------------------------------

def grating_dataset(image_size: int, channels: int, per_class: int,
                    seed: int, num_classes: int = 4) -> list:
    """Oriented-grating distractor task used to give a fresh backbone some
    generic edge/texture features before fine-tuning on TD maps."""
    from .radar import DataSample
    rng = np.random.default_rng(np.random.PCG64(seed))
    ys, xs = np.mgrid[0:image_size, 0:image_size] / image_size
    samples = []
    for ci in range(num_classes):
        angle = math.pi * ci / num_classes
        axis = xs * math.cos(angle) + ys * math.sin(angle)
        for i in range(per_class):
            freq = rng.uniform(2.0, 6.0)
            phase = rng.uniform(0.0, 2.0 * math.pi)
            img = np.sin(2.0 * math.pi * freq * axis + phase)
            img = img + 0.3 * rng.standard_normal(img.shape)
            img = np.broadcast_to(img, (channels,) + img.shape).copy()
            samples.append(DataSample(image=img, label_index=ci,
                                      sample_id=f"grating_{ci}_{i:03d}"))
    return samples


def pretrain_backbone(cfg, epochs: int, seed: int, per_class: int = 60,
                      lr: float = 1e-3, batch_size: int = 32,
                      num_classes: int = 4):
    """Full-parameter training of a fresh backbone on the grating task.

    Returns the trained VitModel (head sized for the distractor classes;
    callers reset it for their own label set).
    """
    from .peft import wrap
    from .radar import split
    from .vit import VitModel
    import dataclasses as _dc

    vit_cfg = _dc.replace(cfg, num_classes=num_classes)
    backbone = VitModel(vit_cfg, np.random.default_rng(np.random.PCG64(seed)))
    dataset = grating_dataset(cfg.image_size, cfg.channels, per_class, seed + 1,
                              num_classes)
    labels = [str(s.label_index) for s in dataset]
    sp = split(labels, ratio=0.8, seed=seed)
    model = wrap(backbone, "full")
    train(model, dataset, sp,
          TrainConfig(lr=lr, batch_size=batch_size, epochs=epochs, seed=seed))
    return backbone
