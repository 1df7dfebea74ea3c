"""Segment sampling, consensus, and the training/evaluation loops.

A clip is split into K near-equal contiguous segments. Training draws one
uniformly random frame per segment; evaluation takes each segment centre.
Per-snippet logits are averaged before softmax (consensus).
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import augment_clip, normalize
from .tensor import Tensor, sgd_step, softmax_cross_entropy


@dataclass
class SegmentPlan:
    k: int
    mode: str = "eval"  # train | eval
    rng_seed: int = 0

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("segment count must be >= 1")
        if self.mode not in ("train", "eval"):
            raise ValueError(f"unknown plan mode: {self.mode}")


def segment_layout(num_frames, k):
    """(start, length) per segment; remainder goes to the leading segments."""
    base, rem = divmod(num_frames, k)
    layout = []
    start = 0
    for i in range(k):
        length = base + (1 if i < rem else 0)
        layout.append((start, length))
        start += length
    return layout


def sample_indices(num_frames, plan, rng=None):
    """One valid frame index per segment, non-decreasing.

    Zero-length segments (num_frames < k) collapse to the nearest valid
    frame by clamping.
    """
    if num_frames < 1:
        raise ValueError("num_frames must be >= 1")
    if plan.mode == "train" and rng is None:
        rng = np.random.default_rng(plan.rng_seed)
    indices = []
    for start, length in segment_layout(num_frames, plan.k):
        if length == 0:
            idx = min(start, num_frames - 1)
        elif plan.mode == "train":
            idx = start + int(rng.integers(length))
        else:
            idx = start + length // 2
        indices.append(idx)
    return indices


def consensus_logits(logits):
    """Mean over the snippet axis of (B, K, num_classes) logits."""
    return T.mean_axis(logits, axis=1)


def step_lr(base_lr, epoch, step_every, factor=0.1):
    """lr(epoch) = base * factor**floor(epoch / step_every)."""
    return base_lr * factor ** (epoch // step_every)


def prepare_clip(sample, plan, aug, norm_mean, norm_std, rng=None):
    """Sample K frames, augment with shared crop parameters, standardize."""
    training = plan.mode == "train"
    indices = sample_indices(sample.num_frames, plan, rng)
    frames = sample.frames[indices]
    frames = augment_clip(frames, aug, rng, training)
    return normalize(frames, norm_mean, norm_std)


def video_predict(model, sample, plan, aug, norm_mean, norm_std):
    """Clip-level class probabilities: sample, forward, average, softmax."""
    clip = prepare_clip(sample, plan, aug, norm_mean, norm_std)
    x = Tensor(clip[None].astype(model.dtype))
    logits = model.forward_snippets(x, training=False)
    avg = logits.data.mean(axis=1)[0]
    return T.softmax(avg)


def _prepare_many(samples, plan, aug, norm_mean, norm_std, seeds, workers):
    def prep(args):
        sample, seed = args
        rng = np.random.default_rng(seed) if seed is not None else None
        return prepare_clip(sample, plan, aug, norm_mean, norm_std, rng)

    jobs = list(zip(samples, seeds))
    if workers and workers > 0:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(prep, jobs))
    return [prep(j) for j in jobs]


def train_epoch(model, samples, plan, state, aug, norm_mean, norm_std,
                batch_size, rng, workers=0):
    """One pass over shuffled minibatches; returns (mean_loss, top1, top5).

    Per-clip randomness comes from seeds pre-drawn from `rng` in dataset
    order, so results are identical for any worker count.
    """
    if not samples:
        raise ValueError("empty dataset")
    n = len(samples)
    clip_seeds = rng.integers(0, 2**63 - 1, size=n)
    drop_seeds = rng.integers(0, 2**63 - 1, size=(n + batch_size - 1) // batch_size)
    order = rng.permutation(n)

    topk = min(5, model.arch.num_classes)
    total_loss, correct, correct5 = 0.0, 0, 0
    for bi, lo in enumerate(range(0, n, batch_size)):
        idx = order[lo : lo + batch_size]
        batch = [samples[i] for i in idx]
        clips = _prepare_many(batch, plan, aug, norm_mean, norm_std,
                              [clip_seeds[i] for i in idx], workers)
        x = Tensor(np.stack(clips).astype(model.dtype))
        labels = np.array([s.label for s in batch])
        drop_rng = np.random.default_rng(drop_seeds[bi])
        logits = model.forward_snippets(x, training=True, rng=drop_rng)
        avg = consensus_logits(logits)
        loss = softmax_cross_entropy(avg, labels)
        T.backward(loss)
        sgd_step(model.registry, state)
        total_loss += float(loss.data) * len(batch)
        correct += int((avg.data.argmax(axis=1) == labels).sum())
        ranked = np.argsort(-avg.data, axis=1)[:, :topk]
        correct5 += int((ranked == labels[:, None]).any(axis=1).sum())
    return total_loss / n, correct / n, correct5 / n


def evaluate(model, samples, plan, aug, norm_mean, norm_std, batch_size=64):
    """Deterministic evaluation; returns (loss, top1, top5, confusion)."""
    if not samples:
        raise ValueError("empty dataset")
    n = len(samples)
    ncls = model.arch.num_classes
    topk = min(5, ncls)
    confusion = np.zeros((ncls, ncls), dtype=np.int64)
    total_loss, top1, top5 = 0.0, 0, 0
    for lo in range(0, n, batch_size):
        batch = samples[lo : lo + batch_size]
        clips = _prepare_many(batch, plan, aug, norm_mean, norm_std,
                              [None] * len(batch), workers=0)
        x = Tensor(np.stack(clips).astype(model.dtype))
        labels = np.array([s.label for s in batch])
        logits = model.forward_snippets(x, training=False)
        avg = logits.data.mean(axis=1)
        z = avg - avg.max(axis=1, keepdims=True)
        nll = -(z[np.arange(len(batch)), labels] - np.log(np.exp(z).sum(axis=1)))
        total_loss += float(nll.sum())
        pred = avg.argmax(axis=1)
        top1 += int((pred == labels).sum())
        ranked = np.argsort(-avg, axis=1)[:, :topk]
        top5 += int((ranked == labels[:, None]).any(axis=1).sum())
        for t, p in zip(labels, pred):
            confusion[t, p] += 1
    return total_loss / n, top1 / n, top5 / n, confusion
