"""Loss, optimiser, learning-rate schedule and the training loop."""

import json
import logging
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Optional

import numpy as np

from . import tensor as T
from .checkpoint import save_checkpoint
from .data import encode_corpus, pad_batch
from .errors import InputError
from .model import BOS_ID, PAD_ID, forward, init_params

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    base_lr: float = 5e-4
    warmup_steps: int = 4000
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-8
    weight_decay: float = 1e-4
    label_smoothing: float = 0.1
    clip_norm: float = 1.0
    batch_tokens: int = 4096
    max_epochs: int = 10
    max_steps: int = 0  # 0 means no step limit
    seed: int = 0
    checkpoint_every: int = 1  # epochs; 0 keeps only the final checkpoint

    def problems(self):
        out = []
        if not (0.0 <= self.label_smoothing < 1.0):
            out.append(f"label_smoothing must lie in [0, 1), got {self.label_smoothing}")
        if not isinstance(self.warmup_steps, int) or self.warmup_steps < 1:
            out.append(f"warmup_steps must be a positive integer, got {self.warmup_steps!r}")
        if self.base_lr <= 0:
            out.append(f"base_lr must be positive, got {self.base_lr}")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            out.append(f"betas must lie in [0, 1), got {self.beta1}, {self.beta2}")
        if self.eps <= 0 or self.weight_decay < 0 or self.clip_norm < 0:
            out.append("eps must be positive; weight_decay and clip_norm non-negative")
        if self.batch_tokens < 1 or self.max_epochs < 1 or self.max_steps < 0 or self.checkpoint_every < 0:
            out.append("batch_tokens and max_epochs must be positive; max_steps and checkpoint_every non-negative")
        return out

    def validate(self):
        probs = self.problems()
        if probs:
            raise InputError("invalid train config: " + "; ".join(probs))
        return self

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise InputError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**data)


def lr_at_step(step, cfg):
    """Linear warmup to ``base_lr`` at ``warmup_steps``, then inverse-sqrt decay."""
    if step < 1:
        raise InputError(f"learning-rate steps start at 1, got {step}")
    w = cfg.warmup_steps
    return cfg.base_lr * min(step ** -0.5, step * w ** -1.5) * w ** 0.5


def label_smoothed_xent(logits, targets, pad_id=PAD_ID, smoothing=0.1):
    """Mean over non-pad positions of the smoothed cross-entropy.

    ``logits`` is position-major (..., n, V); ``targets`` has shape (..., n).
    The smoothed target puts ``1 - smoothing`` on the gold id and
    ``smoothing / (V - 1)`` on every other id.
    """
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != logits.shape[:-1]:
        raise InputError(f"targets shape {targets.shape} does not match logits {logits.shape}")
    return T.smoothed_cross_entropy(logits, targets, targets != pad_id, smoothing)


class AdamState:
    def __init__(self, params):
        self.m = {k: np.zeros_like(t.data) for k, t in params}
        self.v = {k: np.zeros_like(t.data) for k, t in params}
        self.step = 0


def clip_grad_norm(params, max_norm):
    """Scale all gradients so their global L2 norm is at most ``max_norm``."""
    total = math.sqrt(sum(float((t.grad * t.grad).sum()) for _, t in params if t.grad is not None))
    # a non-finite norm is left for adam_step to report by parameter name
    if max_norm > 0 and math.isfinite(total) and total > max_norm:
        s = max_norm / (total + 1e-6)
        for _, t in params:
            if t.grad is not None:
                t.grad = t.grad * s
    return total


def adam_step(params, state, cfg, step, lr=None):
    """Decoupled weight decay followed by one bias-corrected Adam update.

    ``lr`` overrides the schedule. Raises ``FloatingPointError`` naming the
    first parameter with a non-finite gradient, before touching anything.
    """
    for name, t in params:
        if t.grad is not None and not np.all(np.isfinite(t.grad)):
            raise FloatingPointError(f"non-finite gradient in parameter {name!r}")
    rate = lr_at_step(step, cfg) if lr is None else lr
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1**step
    c2 = 1.0 - b2**step
    for name, t in params:
        g = t.grad if t.grad is not None else np.zeros_like(t.data)
        p = t.data
        if cfg.weight_decay:
            p -= rate * cfg.weight_decay * p
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= rate * (m / c1) / (np.sqrt(v / c2) + cfg.eps)
    state.step = step
    return rate


def make_batches(examples, batch_tokens, rng):
    """Length-bucketed batches of example indices, in a seeded random order.

    A batch's cost is its size times the longest side (+1 for bos/eos) and
    stays within ``batch_tokens`` unless a single example exceeds it.
    """
    n = len(examples)
    tie = rng.permutation(n)
    lengths = np.array([max(len(s), len(t) + 1) for s, t in examples])
    order = np.lexsort((tie, lengths))
    batches = []
    cur = []
    width = 0
    for i in order:
        w = max(width, lengths[i])
        if cur and w * (len(cur) + 1) > batch_tokens:
            batches.append(cur)
            cur, w = [], lengths[i]
        cur.append(int(i))
        width = w
    if cur:
        batches.append(cur)
    return [batches[j] for j in rng.permutation(len(batches))]


def collate(examples, idx):
    src = pad_batch([examples[i][0] for i in idx])
    tgt_in = pad_batch([examples[i][1][:-1] for i in idx], prefix=BOS_ID)
    tgt_out = pad_batch([examples[i][1] for i in idx])
    return src, tgt_in, tgt_out


def evaluate_teacher_forced(params, model_cfg, examples, batch_tokens=4096, smoothing=0.0):
    """Eval-mode mean token loss and argmax accuracy over non-pad target tokens."""
    total_loss = 0.0
    correct = 0
    count = 0
    order = sorted(range(len(examples)), key=lambda i: (len(examples[i][0]), len(examples[i][1]), i))
    with T.no_grad():
        for idx in _chunks(order, examples, batch_tokens):
            src, tgt_in, tgt_out = collate(examples, idx)
            logits, _ = forward(src, tgt_in, params, model_cfg)
            keep = tgt_out != PAD_ID
            k = int(keep.sum())
            total_loss += label_smoothed_xent(logits, tgt_out, PAD_ID, smoothing).item() * k
            correct += int(((logits.data.argmax(axis=-1) == tgt_out) & keep).sum())
            count += k
    return total_loss / count, correct / count


def _chunks(order, examples, batch_tokens):
    cur = []
    width = 0
    for i in order:
        w = max(width, len(examples[i][0]), len(examples[i][1]) + 1)
        if cur and w * (len(cur) + 1) > batch_tokens:
            yield cur
            cur, w = [], max(len(examples[i][0]), len(examples[i][1]) + 1)
        cur.append(i)
        width = w
    if cur:
        yield cur


class TrainingDiverged(RuntimeError):
    def __init__(self, message, checkpoint):
        super().__init__(message)
        self.checkpoint = checkpoint


@dataclass
class TrainResult:
    params: object
    state: AdamState
    metrics: list
    checkpoint: Optional[Path]


def _write_checkpoint(path, model_cfg, train_cfg, params, state, vocabs, step, extra=None):
    return save_checkpoint(
        path,
        model_config=model_cfg.to_dict(),
        train_config=train_cfg.to_dict(),
        seed=train_cfg.seed,
        step=step,
        params={k: t.data for k, t in params},
        adam_m=state.m,
        adam_v=state.v,
        vocab={"src": vocabs[0].itos, "tgt": vocabs[1].itos},
        extra=extra,
    )


def train(model_cfg, train_cfg, corpus, vocabs, out_dir=None, valid=None, params=None):
    """Teacher-forced training; returns params, optimiser state and per-epoch metrics.

    Each epoch appends ``{epoch, step, loss, token_accuracy, lr}`` (plus
    ``valid_loss``/``valid_token_accuracy`` when ``valid`` is given) to
    ``out_dir/metrics.jsonl``. Checkpoints go to ``out_dir/checkpoint.bin``.
    A non-finite loss or gradient stops training after saving the last good
    parameters to ``out_dir/last_good.bin``.
    """
    model_cfg.validate()
    train_cfg.validate()
    if len(corpus) == 0:
        raise InputError("training corpus is empty")
    src_vocab, tgt_vocab = vocabs
    if len(src_vocab) != model_cfg.src_vocab_size or len(tgt_vocab) != model_cfg.tgt_vocab_size:
        raise InputError(
            f"vocab sizes {len(src_vocab)}/{len(tgt_vocab)} do not match model config "
            f"{model_cfg.src_vocab_size}/{model_cfg.tgt_vocab_size}"
        )
    examples = encode_corpus(corpus, src_vocab, tgt_vocab)
    longest = max(max(len(s), len(t)) for s, t in examples)
    if longest > model_cfg.max_len:
        raise InputError(f"corpus has a sequence of {longest} ids, above max_len {model_cfg.max_len}")
    valid_examples = encode_corpus(valid, src_vocab, tgt_vocab) if valid is not None else None

    seed = train_cfg.seed
    params = params if params is not None else init_params(model_cfg, seed)
    state = AdamState(params)
    drop_rng = np.random.default_rng([seed, 1])
    out_dir = Path(out_dir) if out_dir is not None else None
    metrics_path = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        metrics_path = out_dir / "metrics.jsonl"
        metrics_path.write_text("")
    ckpt = None
    metrics = []
    step = 0
    rate = 0.0
    for epoch in range(1, train_cfg.max_epochs + 1):
        batches = make_batches(examples, train_cfg.batch_tokens, np.random.default_rng([seed, 2, epoch]))
        tot_loss = 0.0
        tot_correct = 0
        tot_tokens = 0
        for idx in batches:
            if train_cfg.max_steps and step >= train_cfg.max_steps:
                break
            src, tgt_in, tgt_out = collate(examples, idx)
            logits, _ = forward(src, tgt_in, params, model_cfg, "train", drop_rng)
            loss = label_smoothed_xent(logits, tgt_out, PAD_ID, train_cfg.label_smoothing)
            value = loss.item()
            try:
                if not math.isfinite(value):
                    raise FloatingPointError(f"non-finite loss {value} at step {step + 1}")
                params.zero_grad()
                loss.backward()
                clip_grad_norm(params, train_cfg.clip_norm)
                rate = adam_step(params, state, train_cfg, step + 1)
            except FloatingPointError as exc:
                last = None
                if out_dir is not None:
                    last = _write_checkpoint(out_dir / "last_good.bin", model_cfg, train_cfg, params, state, vocabs, step)
                raise TrainingDiverged(str(exc), last) from exc
            step += 1
            keep = tgt_out != PAD_ID
            k = int(keep.sum())
            tot_loss += value * k
            tot_correct += int(((logits.data.argmax(axis=-1) == tgt_out) & keep).sum())
            tot_tokens += k
        if tot_tokens == 0:
            break
        rec = {
            "epoch": epoch,
            "step": step,
            "loss": tot_loss / tot_tokens,
            "token_accuracy": tot_correct / tot_tokens,
            "lr": rate,
        }
        if valid_examples is not None:
            vl, va = evaluate_teacher_forced(params, model_cfg, valid_examples, train_cfg.batch_tokens)
            rec["valid_loss"] = vl
            rec["valid_token_accuracy"] = va
        metrics.append(rec)
        log.info("epoch %d step %d loss %.4f acc %.4f", epoch, step, rec["loss"], rec["token_accuracy"])
        if metrics_path is not None:
            with open(metrics_path, "a") as fh:
                fh.write(json.dumps(rec) + "\n")
            every = train_cfg.checkpoint_every
            if every and epoch % every == 0:
                ckpt = _write_checkpoint(out_dir / "checkpoint.bin", model_cfg, train_cfg, params, state, vocabs, step)
        if train_cfg.max_steps and step >= train_cfg.max_steps:
            break
    if out_dir is not None:
        ckpt = _write_checkpoint(out_dir / "checkpoint.bin", model_cfg, train_cfg, params, state, vocabs, step)
    return TrainResult(params, state, metrics, ckpt)
