"""Training loop: Adam, deterministic batching, loss log and checkpoints."""

import math
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .model import LossBreakdown

LOG_NAME = "loss.tsv"
CHECKPOINT_NAME = "checkpoint.svpw"


class NumericalAbort(RuntimeError):
    """Training hit a non-finite loss or gradient."""


class Adam:
    def __init__(self, params, lr=2e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in params.items()}

    def step(self, grads):
        """Apply one update; ``grads`` maps parameter name -> array."""
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for name, p in self.params.items():
            g = grads[name]
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            update = (self.lr / c1) * m / (np.sqrt(v / c2) + self.eps)
            p.data = (p.data - update).astype(p.dtype, copy=False)


def sample_batch(sequences, batch_size, clip_len, seed, step):
    """Clips [clip_len, N, C, H, W] drawn from ``(seed, step)`` alone.

    Sequences are taken without replacement when the pool is large enough;
    each clip starts at a random frame of its sequence.
    """
    rng = np.random.default_rng([seed, step])
    replace = batch_size > len(sequences)
    picks = rng.choice(len(sequences), size=batch_size, replace=replace)
    clips = []
    for i in picks:
        frames = sequences[int(i)].frames
        if frames.shape[0] < clip_len:
            raise ValueError(f"sequence of {frames.shape[0]} frames is shorter than the {clip_len}-frame clip")
        start = int(rng.integers(0, frames.shape[0] - clip_len + 1))
        clips.append(frames[start : start + clip_len])
    return np.stack(clips, axis=1).astype(np.float32)


def format_log_line(step, loss):
    return "\t".join([str(step)] + [repr(float(v)) for v in loss.values()])


def log_header():
    return "\t".join(("step",) + LossBreakdown.COLUMNS)


def _save_atomic(params, path):
    tmp = Path(str(path) + ".tmp")
    params.save(tmp)
    os.replace(tmp, path)


@dataclass
class TrainResult:
    losses: list  # LossBreakdown per step
    steps_done: int
    checkpoint: Path = None


def train_step(model, optimizer, clip, step):
    c = model.config
    k = c.cond_frames
    try:
        with T.GradientTape() as tape:
            result = model.rollout(clip[:k], c.horizon, "train_posterior", seed=c.seed, targets=clip[k:], noise_key=step)
            loss = model.elbo_loss(clip, result)
    except FloatingPointError as e:
        raise NumericalAbort(f"step {step}: {e}") from e
    if not math.isfinite(loss.total):
        raise NumericalAbort(f"non-finite loss at step {step}: {loss.total}")
    names = model.params.names()
    grads = dict(zip(names, tape.gradient(loss.tensor, model.params.tensors())))
    for n, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericalAbort(f"non-finite gradient for {n!r} at step {step}")
    optimizer.step(grads)
    return loss


def train(model, sequences, steps=None, out_dir=None, checkpoint_every=500, progress=None):
    """Train ``model`` in place on ``sequences`` for ``steps`` optimizer steps.

    With ``out_dir`` set, writes one tab-separated loss line per step and a
    checkpoint every ``checkpoint_every`` steps and at the end. A non-finite
    loss raises :class:`NumericalAbort` and leaves the last good checkpoint.
    """
    c = model.config
    steps = c.steps if steps is None else steps
    clip_len = c.cond_frames + c.horizon
    optimizer = Adam(model.params, lr=c.lr)
    out = Path(out_dir) if out_dir is not None else None
    ckpt = out / CHECKPOINT_NAME if out is not None else None
    log = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        _save_atomic(model.params, ckpt)
        log = open(out / LOG_NAME, "w")
        log.write(log_header() + "\n")
    losses = []
    try:
        for step in range(1, steps + 1):
            clip = sample_batch(sequences, c.batch_size, clip_len, c.seed, step)
            loss = train_step(model, optimizer, clip, step)
            losses.append(loss)
            if log is not None:
                log.write(format_log_line(step, loss) + "\n")
                log.flush()
                if step % checkpoint_every == 0 or step == steps:
                    _save_atomic(model.params, ckpt)
            if progress is not None:
                progress(step, loss)
    finally:
        if log is not None:
            log.close()
    return TrainResult(losses, len(losses), ckpt)


def read_loss_log(path):
    rows = []
    for line in Path(path).read_text().splitlines()[1:]:
        parts = line.split("\t")
        rows.append((int(parts[0]), [float(v) for v in parts[1:]]))
    return rows
