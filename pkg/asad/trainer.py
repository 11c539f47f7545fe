"""
Training loop: Adam with coupled weight decay, cosine annealing, early
stopping on validation accuracy, and seeded multi-run orchestration.
"""
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np
import pandas as pd
from tqdm import tqdm

from asad import ops
from asad.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from asad.dataio import WindowSet
from asad.errors import NonFiniteError, TrainingError
from asad.models import EvalReport, SWCNNConfig, SWIMConfig, TrainConfig
from asad.swcnn import SWCNN, locus_logits_array, multitask_loss
from asad.swim import SWIM
from asad.tensor import backward
from asad.utils import derive_rng, write_table

logger = logging.getLogger(__name__)

HISTORY_COLUMNS = ['epoch', 'train_loss', 'train_acc', 'val_acc', 'lr']


def cosine_lr(epoch, lr0, t_max):
    """0.5 * lr0 * (1 + cos(pi * epoch / t_max)), eta_min = 0."""
    if t_max <= 0:
        return lr0
    if not 0 <= epoch <= t_max:
        raise ValueError(f"epoch {epoch} outside [0, {t_max}]")
    return 0.5 * lr0 * (1.0 + math.cos(math.pi * epoch / t_max))


def adam_step(params, grads, moments, t, lr, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
    """One Adam update of ``params`` (name -> array, in place).

    ``moments`` maps name -> (m, v) and is filled on first use. Weight decay is
    added to the gradient. Non-finite gradients abort before any update.
    """
    if t < 1:
        raise ValueError(f"Adam step counter must be >= 1, got {t}")
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for {name}; step {t} rejected")
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for name, p in params.items():
        g = grads[name]
        if weight_decay:
            g = g + weight_decay * p
        if name not in moments:
            moments[name] = (np.zeros_like(p), np.zeros_like(p))
        m, v = moments[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p -= (lr * (m / bc1) / (np.sqrt(v / bc2) + eps)).astype(p.dtype)
    return params, moments


class Adam:
    """Adam over a model's named parameters with per-prefix learning rates."""

    def __init__(self, named_params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0, groups=None):
        self.params = dict(named_params)
        self.lr = lr
        self.betas = tuple(betas)
        self.eps = eps
        self.weight_decay = weight_decay
        self.groups = list(groups or [])
        self.moments = {}
        self.t = 0

    def lr_for(self, name):
        for group in self.groups:
            if name.startswith(group['prefix']):
                return group['lr']
        return self.lr

    def step(self, scale=1.0):
        self.t += 1
        by_lr = {}
        for name, p in self.params.items():
            by_lr.setdefault(self.lr_for(name), []).append(name)
        for lr, names in by_lr.items():
            params = {n: self.params[n].data for n in names}
            grads = {n: (self.params[n].grad if self.params[n].grad is not None else np.zeros_like(params[n]))
                     for n in names}
            adam_step(params, grads, self.moments, self.t, lr * scale,
                      self.betas[0], self.betas[1], self.eps, self.weight_decay)

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()


# ---------------------------------------------------------------------------
# Prediction helpers
# ---------------------------------------------------------------------------

def predict_logits(model, X, batch_size=256):
    """Eval-mode locus logits [B, 2] for windows X [B, C, T]."""
    if isinstance(model, SWIM):
        return model.locus_logits(X, batch_size)
    return locus_logits_array(model, X, batch_size)


def windowset_logits(model, window_set, batch_size=256):
    """Logits and labels for a whole WindowSet, assembled batch by batch."""
    logits, labels = [], []
    for start in range(0, len(window_set), batch_size):
        idx = np.arange(start, min(start + batch_size, len(window_set)))
        X, locus, _ = window_set.batch(idx)
        logits.append(predict_logits(model, X, batch_size))
        labels.append(locus)
    if not logits:
        return np.zeros((0, 2), dtype=np.float32), np.zeros(0, dtype=np.int64)
    return np.concatenate(logits), np.concatenate(labels)


def windowset_accuracy(model, window_set, batch_size=256):
    logits, labels = windowset_logits(model, window_set, batch_size)
    if labels.size == 0:
        raise TrainingError("cannot score an empty window set")
    return float(np.mean(logits.argmax(axis=1) == labels))


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    checkpoint: Checkpoint
    history: pd.DataFrame
    best_epoch: int
    best_val_acc: float

    @property
    def model(self):
        return self.checkpoint.to_model()


def window_samples(model_kind, config, swim_config, fs):
    if model_kind == 'swim':
        return swim_config.total_samples
    return int(round(config.window_seconds * fs))


def build_window_sets(model_kind, dataset, split, config, swim_config=None):
    """Training (overlapping) and validation (alpha=0) window tables."""
    fs = dataset[0].fs if dataset else 128
    window = window_samples(model_kind, config, swim_config or SWIMConfig(), fs)
    center_windows = model_kind == 'swcnn'
    train_set = WindowSet(dataset, split.partitions['train'], window, config.alpha, center_windows)
    val_set = WindowSet(dataset, split.partitions['val'], window, 0.0, center_windows)
    return train_set, val_set


def init_model(model_kind, seed, swcnn_config=None, swim_config=None, pretrained=None):
    rng = derive_rng(seed, 0)
    if model_kind == 'swcnn':
        return SWCNN(swcnn_config or SWCNNConfig(), rng)
    if model_kind != 'swim':
        raise TrainingError(f"unknown model kind {model_kind!r}")
    if pretrained is not None:
        cnn = pretrained.to_model() if isinstance(pretrained, Checkpoint) else pretrained
        if isinstance(cnn, SWIM):
            cnn = cnn.cnn
        return SWIM.from_swcnn(cnn, swim_config, rng)
    return SWIM(swim_config, swcnn_config, rng)


def train(model_kind, dataset, split, config=None, seed=0, swcnn_config=None, swim_config=None,
          pretrained=None, progress=False):
    """Train one model on ``split`` and return the best-validation checkpoint and history."""
    config = config or TrainConfig.for_model(model_kind)
    swim_config = swim_config or SWIMConfig()
    train_set, val_set = build_window_sets(model_kind, dataset, split, config, swim_config)
    if len(train_set) == 0 or len(val_set) == 0:
        raise TrainingError(f"{split.protocol} held_out={split.held_out}: empty partition "
                            f"({len(train_set)} train / {len(val_set)} val windows)")
    model = init_model(model_kind, seed, swcnn_config, swim_config, pretrained)
    groups = [{'prefix': 'cnn.', 'lr': config.cnn_lr}] if model_kind == 'swim' else []
    optimizer = Adam(model.named_parameters(), config.lr, config.adam_betas, config.adam_eps,
                     config.weight_decay, groups)
    cnn_mode = 'eval' if config.freeze_batchnorm else 'train'

    logger.info(f"Training {model_kind} seed={seed} held_out={split.held_out}: "
                f"{len(train_set)} train / {len(val_set)} val windows, {model.num_parameters()} parameters")
    history = []
    best, best_epoch, best_val, wait = None, -1, -1.0, 0
    epochs = range(config.max_epochs)
    if progress:
        epochs = tqdm(epochs, desc=f"{model_kind} seed {seed}", leave=False)
    for epoch in epochs:
        scale = cosine_lr(epoch, 1.0, config.max_epochs)
        order = derive_rng(seed, 1, epoch).permutation(len(train_set))
        loss_sum, correct, seen = 0.0, 0, 0
        for step, start in enumerate(range(0, len(order), config.batch_size)):
            idx = order[start:start + config.batch_size]
            X, locus, subject = train_set.batch(idx, config.beta, seed, epoch)
            if model_kind == 'swcnn':
                logits = model(X, 'train')
                loss = multitask_loss(logits, locus, subject, config.gamma)
            else:
                logits = model(X, 'train', cnn_mode=cnn_mode)
                loss = ops.softmax_cross_entropy(logits, locus)
            if not np.isfinite(loss.item()):
                raise TrainingError(f"loss diverged (non-finite) at epoch {epoch}, step {step}")
            optimizer.zero_grad()
            backward(loss)
            try:
                optimizer.step(scale)
            except NonFiniteError as e:
                raise TrainingError(f"epoch {epoch}, step {step}: {e}") from e
            loss_sum += loss.item() * len(idx)
            correct += int(np.sum(logits.data[:, :2].argmax(axis=1) == locus))
            seen += len(idx)

        val_acc = windowset_accuracy(model, val_set, config.eval_batch_size)
        history.append({
            'epoch': epoch,
            'train_loss': loss_sum / seen,
            'train_acc': correct / seen,
            'val_acc': val_acc,
            'lr': config.lr * scale,
        })
        logger.info(f"epoch {epoch}: loss {loss_sum / seen:.4f} train_acc {correct / seen:.4f} val_acc {val_acc:.4f}")
        if val_acc > best_val:
            best_val, best_epoch, wait = val_acc, epoch, 0
            best = Checkpoint.from_model(model, {
                'epoch': epoch, 'val_acc': val_acc, 'seed': seed,
                'protocol': split.protocol, 'held_out': split.held_out,
            })
        else:
            wait += 1
            if wait >= config.patience:
                logger.info(f"Early stop after epoch {epoch}; best epoch {best_epoch} (val_acc {best_val:.4f})")
                break

    return TrainResult(best, pd.DataFrame(history, columns=HISTORY_COLUMNS), best_epoch, best_val)


# ---------------------------------------------------------------------------
# Multi-run orchestration
# ---------------------------------------------------------------------------

def run_name(model_kind, split, seed):
    held = 'all' if split.held_out is None else split.held_out
    return f"{model_kind}_{split.protocol}_{held}_s{seed}"


def resolve_pretrained(template, held_out, seed):
    if template is None:
        return None
    if isinstance(template, Checkpoint):
        return template
    return load_checkpoint(template.format(held_out='all' if held_out is None else held_out, seed=seed))


def _run_one(job):
    model_kind, dataset, split, config, seed, swcnn_config, swim_config, pretrained, out_dir, progress = job
    result = train(model_kind, dataset, split, config, seed, swcnn_config, swim_config,
                   resolve_pretrained(pretrained, split.held_out, seed), progress)
    fs = dataset[0].fs
    window = window_samples(model_kind, config, swim_config or SWIMConfig(), fs)
    test_set = WindowSet(dataset, split.partitions['test'], window, 0.0, model_kind == 'swcnn')
    test_acc = windowset_accuracy(result.model, test_set, config.eval_batch_size)
    name = run_name(model_kind, split, seed)
    if out_dir:
        save_checkpoint(result.checkpoint, os.path.join(out_dir, f"{name}.ckpt"))
        write_table(result.history, os.path.join(out_dir, f"history_{name}.csv"), HISTORY_COLUMNS)
    logger.info(f"{name}: best val {result.best_val_acc:.4f} (epoch {result.best_epoch}), test {test_acc:.4f}")
    return {'held_out': split.held_out, 'seed': seed, 'val_acc': result.best_val_acc,
            'test_acc': test_acc, 'n_test_windows': len(test_set), 'checkpoint': result.checkpoint}


def train_runs(model_kind, dataset, splits, config=None, seeds=None, jobs=1, out_dir=None,
               swcnn_config=None, swim_config=None, pretrained=None, progress=False):
    """Train every (split, seed) pair; test scores always come from the best-val checkpoint.

    ``pretrained`` is a Checkpoint or a path template with {held_out} and {seed}.
    Returns (EvalReport, list of per-run dicts).
    """
    config = config or TrainConfig.for_model(model_kind)
    seeds = list(config.seeds if seeds is None else seeds)
    jobs_list = [(model_kind, dataset, split, config, seed, swcnn_config, swim_config, pretrained, out_dir,
                  progress and jobs == 1)
                 for split in splits for seed in seeds]
    if jobs > 1 and len(jobs_list) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_one, jobs_list))
    else:
        results = [_run_one(job) for job in jobs_list]

    report = EvalReport(splits[0].protocol if splits else 'every-trial')
    for r in results:
        report.add(r['held_out'], r['seed'], r['val_acc'], r['test_acc'], r['n_test_windows'])
    return report, results
