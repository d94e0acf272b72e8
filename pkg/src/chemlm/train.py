"""LAMB optimizer, MLM pretraining with bucket accumulation, fine-tuning and metrics."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.stats import rankdata

from . import nncore as nn
from .checkpoint import load_checkpoint, save_checkpoint
from .dataset import BucketSpec, apply_mlm_corruption, bucketize, empty_carry, pad_ids
from .errors import EmptySplit, LabelParse, NonFiniteGradient, SingleClass, ValidationError
from .model import (
    EncoderState,
    FinetuneHead,
    embed_many,
    finetune_forward,
    init_head,
    mlm_loss,
    pooled_embeddings,
)
from .tokenizer import TokenSequence, Vocabulary, encode

log = logging.getLogger(__name__)


# optimizer


@dataclass
class LambState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-6
    weight_decay: float = 0.0
    trust_clamp: float = 10.0
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def export(self, prefix: str = "opt.") -> dict[str, np.ndarray]:
        out = {f"{prefix}m.{k}": a for k, a in self.m.items()}
        out.update({f"{prefix}v.{k}": a for k, a in self.v.items()})
        return out

    def restore(self, tensors: dict[str, np.ndarray], prefix: str = "opt.") -> None:
        for key, arr in tensors.items():
            if key.startswith(prefix + "m."):
                self.m[key[len(prefix) + 2 :]] = arr.copy()
            elif key.startswith(prefix + "v."):
                self.v[key[len(prefix) + 2 :]] = arr.copy()


def decays(name: str) -> bool:
    """Weight decay applies to projections only, not layer norms or embeddings."""
    parts = name.split(".")
    return not (any(p.startswith("ln") for p in parts) or parts[-1].endswith("_emb"))


def lamb_step(params: Iterable[tuple[str, nn.Tensor]], opt: LambState, decay: Callable[[str], bool] = decays) -> None:
    """One LAMB update of every parameter that has a gradient.

    Per tensor: Adam-style bias-corrected direction plus decoupled weight
    decay, scaled by the trust ratio ``|w| / |r|`` clamped to
    ``[0, trust_clamp]`` (taken as 1 when either norm is zero).
    """
    params = [(n, p) for n, p in params if p.grad is not None]
    for name, p in params:
        if not np.all(np.isfinite(p.grad)):
            raise NonFiniteGradient(name)
    opt.step += 1
    b1, b2 = opt.beta1, opt.beta2
    c1 = 1.0 - b1**opt.step
    c2 = 1.0 - b2**opt.step
    for name, p in params:
        g = p.grad
        m = opt.m.get(name)
        v = opt.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        opt.m[name], opt.v[name] = m, v
        r = (m / c1) / (np.sqrt(v / c2) + opt.eps)
        if opt.weight_decay and decay(name):
            r = r + opt.weight_decay * p.data
        w_norm = float(np.linalg.norm(p.data))
        r_norm = float(np.linalg.norm(r))
        trust = 1.0 if w_norm == 0.0 or r_norm == 0.0 else min(max(w_norm / r_norm, 0.0), opt.trust_clamp)
        p.data = p.data - (opt.lr * trust) * r


# configuration


@dataclass
class TrainConfig:
    lr: float = 1.6e-4
    finetune_lr: float = 3e-5
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-6
    weight_decay: float = 0.0
    trust_clamp: float = 10.0
    batch_size: int = 32
    epochs: int = 1
    seed: int = 0
    eval_every: int = 0
    checkpoint_every: int = 0
    select_p: float = 0.15
    mask_p: float = 0.8
    random_p: float = 0.1
    finetune_epochs: int = 50
    finetune_batch_size: int = 64
    head_hidden: int = 768
    head_dropout: float = 0.1
    head_standardize: bool = True

    def __post_init__(self):
        if self.lr < 0 or self.finetune_lr < 0:
            raise ValidationError("learning rates must be non-negative")
        if self.batch_size < 1:
            raise ValidationError("batch_size must be >= 1")

    def lamb(self, lr: float | None = None) -> LambState:
        return LambState(
            lr=self.lr if lr is None else lr,
            beta1=self.beta1,
            beta2=self.beta2,
            eps=self.eps,
            weight_decay=self.weight_decay,
            trust_clamp=self.trust_clamp,
        )


# pretraining


@dataclass
class MetricRow:
    step: int
    bucket: str
    loss: float
    tokens_per_sec: float


class MetricsWriter:
    """CSV ``step,bucket,loss,tokens_per_sec`` to a file and optionally stdout."""

    header = ("step", "bucket", "loss", "tokens_per_sec")

    def __init__(self, path=None, echo: bool = False, append: bool = False):
        self._fh = None
        self.echo = echo
        if path is not None:
            exists = append and Path(path).exists()
            self._fh = open(path, "a" if append else "w", newline="", encoding="utf-8")
            self._csv = csv.writer(self._fh, lineterminator="\n")
            if not exists:
                self._csv.writerow(self.header)
        if echo:
            print(",".join(self.header), flush=True)

    def __call__(self, row: MetricRow) -> None:
        fields = (row.step, row.bucket, repr(float(row.loss)), f"{row.tokens_per_sec:.1f}")
        if self._fh is not None:
            self._csv.writerow(fields)
            self._fh.flush()
        if self.echo:
            print(",".join(map(str, fields)), flush=True)

    def close(self):
        if self._fh is not None:
            self._fh.close()


def accumulate_gradients(state: EncoderState, parts, *, train: bool = False, rng=None):
    """Backpropagate the row-weighted mean of per-bucket MLM losses.

    ``parts`` holds ``(n_rows, MaskedBatch)`` pairs.  Each bucket gets its
    own forward and backward pass with weight ``n_rows / total_rows``;
    gradients add up in ``.grad``.  Returns the per-bucket losses and their
    weighted mean.
    """
    total = sum(n for n, _ in parts)
    losses = []
    aggregate = 0.0
    for n, mb in parts:
        weight = n / total
        with nn.Tape() as tape:
            loss = mlm_loss(state, mb, train=train, rng=rng)
            scaled = loss * weight
        nn.backward(scaled, tape)
        losses.append(loss.item())
        aggregate += weight * loss.item()
    return losses, aggregate


class Pretrainer:
    """MLM pretraining over length buckets with one optimizer step per minibatch.

    Gradients of the per-bucket losses are accumulated with weights equal to
    each bucket's share of the emitted rows, so the step follows the
    row-weighted mean loss.  All randomness (shuffling, masking, dropout)
    comes from one generator whose state is checkpointed for resume.
    """

    def __init__(
        self,
        state: EncoderState,
        vocab: Vocabulary,
        seqs: Sequence[TokenSequence],
        config: TrainConfig,
        buckets: BucketSpec = BucketSpec(),
        sink: Callable[[MetricRow], None] | None = None,
    ):
        if not seqs:
            raise EmptySplit("no training sequences")
        self.state = state
        self.vocab = vocab
        self.seqs = list(seqs)
        self.by_line = {s.line_id: s for s in self.seqs}
        if len(self.by_line) != len(self.seqs) or None in self.by_line:
            raise ValidationError("training sequences need unique line ids")
        self.config = config
        self.buckets = buckets
        self.sink = sink
        self.rng = np.random.default_rng(config.seed)
        self.opt = config.lamb()
        self.step = 0
        self.epoch = 0
        self.perm: np.ndarray | None = None
        self.cursor = 0
        self.carry = empty_carry(buckets)
        self.history: list[MetricRow] = []

    @property
    def done(self) -> bool:
        return self.epoch >= self.config.epochs

    def run(self, max_steps: int | None = None, checkpoint_dir=None, vocab_path=None) -> list[MetricRow]:
        """Train until all epochs finish or ``max_steps`` more steps were taken."""
        taken = 0
        n = len(self.seqs)
        bs = self.config.batch_size
        while not self.done:
            if self.perm is None:
                self.perm = self.rng.permutation(n)
                self.cursor = 0
            while self.cursor < n:
                if max_steps is not None and taken >= max_steps:
                    return self.history
                idx = self.perm[self.cursor : self.cursor + bs]
                self.cursor += bs
                last = self.cursor >= n
                batch, self.carry = bucketize([self.seqs[i] for i in idx], self.buckets, self.carry, flush=last)
                if batch and self._step(batch):
                    taken += 1
                    every = self.config.checkpoint_every
                    if checkpoint_dir is not None and every and self.step % every == 0:
                        self.save(Path(checkpoint_dir) / f"step_{self.step}.mlfc", vocab_path)
            self.epoch += 1
            self.perm = None
        return self.history

    def _step(self, batch) -> bool:
        cfg = self.config
        seeds = self.rng.integers(0, 2**63, size=len(batch.buckets))
        dropout_rng = np.random.default_rng(int(self.rng.integers(0, 2**63)))
        t0 = time.perf_counter()
        masked = []
        for b, seed in zip(batch.buckets, seeds):
            mb = apply_mlm_corruption(
                b.ids, self.vocab, int(seed), cfg.select_p, cfg.mask_p, cfg.random_p, padding_mask=b.mask
            )
            if mb.loss_mask.any():
                masked.append((b, mb))
        if not masked:
            return False
        self.state.zero_grad()
        losses, aggregate = accumulate_gradients(
            self.state, [(b.n_rows, mb) for b, mb in masked], train=True, rng=dropout_rng
        )
        rows = [(str(b.index), loss) for (b, _), loss in zip(masked, losses)]
        tokens = sum(int(b.mask.sum()) for b, _ in masked)
        lamb_step(self.state.parameters(), self.opt)
        self.step += 1
        rate = tokens / max(time.perf_counter() - t0, 1e-9)
        for bucket, value in rows + [("all", aggregate)]:
            row = MetricRow(self.step, bucket, value, rate)
            self.history.append(row)
            if self.sink is not None:
                self.sink(row)
        return True

    def aggregate_losses(self) -> list[float]:
        return [r.loss for r in self.history if r.bucket == "all"]

    # checkpointing

    def save(self, path, vocab_path=None) -> None:
        header = {
            "kind": "pretrain",
            "vocab_path": str(vocab_path) if vocab_path is not None else None,
            "vocab_size": len(self.vocab),
            "train": asdict(self.config),
            "buckets.boundaries": [list(b) for b in self.buckets.boundaries],
            "buckets.min_emit": list(self.buckets.min_emit),
            "loop.step": self.step,
            "loop.epoch": self.epoch,
            "loop.cursor": self.cursor,
            "loop.perm": None if self.perm is None else [int(i) for i in self.perm],
            "loop.carry": [[s.line_id for s in q] for q in self.carry],
            "loop.rng": self.rng.bit_generator.state,
            "opt.step": self.opt.step,
        }
        save_checkpoint(path, self.state, header, self.opt.export())

    @classmethod
    def resume(cls, path, vocab, seqs, sink=None, config: TrainConfig | None = None):
        state, header, extra = load_checkpoint(path)
        cfg = config or TrainConfig(**header["train"])
        spec = BucketSpec(tuple(map(tuple, header["buckets.boundaries"])), tuple(header["buckets.min_emit"]))
        self = cls(state, vocab, seqs, cfg, spec, sink)
        self.step = header["loop.step"]
        self.epoch = header["loop.epoch"]
        self.cursor = header["loop.cursor"]
        perm = header["loop.perm"]
        self.perm = None if perm is None else np.asarray(perm, dtype=np.int64)
        self.carry = [[self.by_line[i] for i in q] for q in header["loop.carry"]]
        self.rng.bit_generator.state = header["loop.rng"]
        self.opt.step = header["opt.step"]
        self.opt.restore(extra)
        return self


def encode_corpus(lines: Sequence[str], vocab: Vocabulary):
    """Encode every line; returns ``(sequences, skipped_line_numbers)``."""
    seqs, skipped = [], []
    for i, line in enumerate(lines):
        try:
            seqs.append(encode(line.strip(), vocab, line_id=i))
        except ValidationError:
            skipped.append(i)
    return seqs, skipped


def pretrain(state, vocab, seqs, config: TrainConfig, buckets: BucketSpec = BucketSpec(), sink=None):
    trainer = Pretrainer(state, vocab, seqs, config, buckets, sink)
    trainer.run()
    return trainer


# metrics


def auc_roc(scores, labels) -> float:
    """Rank-statistic AUC with midranks for ties."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise ValidationError("scores and labels differ in length")
    pos = labels == 1
    n1 = int(pos.sum())
    n0 = len(labels) - n1
    if n1 == 0 or n0 == 0:
        raise SingleClass("AUC-ROC needs both classes present")
    ranks = rankdata(scores)
    return float((ranks[pos].sum() - n1 * (n1 + 1) / 2.0) / (n1 * n0))


def evaluate_metrics(predictions, labels, task: str = "regression") -> dict[str, float]:
    predictions = np.asarray(predictions, dtype=np.float64)
    labels = np.asarray(labels)
    if len(predictions) != len(labels):
        raise ValidationError(f"{len(predictions)} predictions for {len(labels)} labels")
    if task == "regression":
        p = predictions.reshape(len(predictions), -1)
        y = labels.astype(np.float64).reshape(len(labels), -1)
        err = p - y
        rmse = np.sqrt((err**2).mean(axis=0))
        mae = np.abs(err).mean(axis=0)
        out = {}
        if p.shape[1] > 1:
            for j in range(p.shape[1]):
                out[f"rmse_{j}"] = float(rmse[j])
                out[f"mae_{j}"] = float(mae[j])
        out["rmse"] = float(rmse.mean())
        out["mae"] = float(mae.mean())
        return out
    if task == "classification":
        y = labels.astype(np.int64).ravel()
        if predictions.ndim == 1:
            return {"auc": auc_roc(predictions, y)}
        if predictions.shape[1] == 2:
            return {"auc": auc_roc(predictions[:, 1] - predictions[:, 0], y)}
        aucs = [auc_roc(predictions[:, c], (y == c).astype(np.int64)) for c in range(predictions.shape[1])]
        out = {f"auc_{c}": a for c, a in enumerate(aucs)}
        out["auc"] = float(np.mean(aucs))
        return out
    raise ValidationError(f"unknown task type {task!r}")


# fine-tuning data


@dataclass
class LabeledData:
    smiles: list[str]
    targets: np.ndarray
    names: list[str]


def read_labeled_csv(path) -> LabeledData:
    smiles, rows = [], []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise LabelParse(f"{path}: empty file") from None
        if len(header) < 2 or header[0].strip().lower() != "smiles":
            raise LabelParse(f"{path}: header must be 'smiles,target1[,...]'")
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != len(header):
                raise LabelParse(f"{path}:{lineno}: expected {len(header)} fields, got {len(rec)}")
            try:
                rows.append([float(x) for x in rec[1:]])
            except ValueError:
                raise LabelParse(f"{path}:{lineno}: non-numeric target in {rec[1:]!r}") from None
            smiles.append(rec[0].strip())
    return LabeledData(smiles, np.asarray(rows, dtype=np.float64).reshape(len(rows), len(header) - 1), header[1:])


def read_split(path) -> dict[str, np.ndarray]:
    """Sections ``train:``, ``valid:``, ``test:`` each followed by zero-based indices."""
    sections: dict[str, list[int]] = {}
    current = None
    for raw in Path(path).read_text(encoding="utf-8").splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        head, sep, rest = line.partition(":")
        if sep and head.strip() in ("train", "valid", "test"):
            current = head.strip()
            sections.setdefault(current, [])
            line = rest
        if current is None:
            raise LabelParse(f"{path}: indices before any section header")
        try:
            sections[current].extend(int(tok) for tok in line.replace(",", " ").split())
        except ValueError:
            raise LabelParse(f"{path}: bad index in line {raw!r}") from None
    for name in ("train", "valid", "test"):
        if not sections.get(name):
            raise EmptySplit(f"{path}: split section {name!r} is missing or empty")
    return {k: np.asarray(v, dtype=np.int64) for k, v in sections.items()}


# fine-tuning


@dataclass
class FinetuneResult:
    head: FinetuneHead
    state: EncoderState
    metrics: dict[str, float]
    best_epoch: int
    history: list[tuple[int, float, float]]
    test_predictions: np.ndarray
    target_mean: np.ndarray | None = None
    target_std: np.ndarray | None = None
    feature_mean: np.ndarray | None = None
    feature_std: np.ndarray | None = None


def _batched(idx, size):
    for i in range(0, len(idx), size):
        yield idx[i : i + size]


def finetune(
    state: EncoderState,
    vocab: Vocabulary,
    data: LabeledData,
    split: dict[str, np.ndarray],
    config: TrainConfig,
    *,
    task: str = "regression",
    mode: str = "frozen",
) -> FinetuneResult:
    """Fit a two-layer head on mean-pooled embeddings.

    ``frozen`` trains the head on fixed embeddings; ``finetuned`` updates the
    encoder and head together.  Regression targets are standardized with
    train-split statistics.  With ``config.head_standardize`` the head sees
    embeddings z-scored by train-split statistics of the starting encoder
    (mean-pooled embeddings are dominated by a few directions).  The epoch
    with the lowest validation loss is kept and scored on the test split.
    """
    if mode not in ("frozen", "finetuned"):
        raise ValidationError(f"mode must be 'frozen' or 'finetuned', got {mode!r}")
    n = len(data.smiles)
    for name, idx in split.items():
        if len(idx) == 0:
            raise EmptySplit(f"split {name!r} is empty")
        if idx.min() < 0 or idx.max() >= n:
            raise LabelParse(f"split {name!r} references rows outside 0..{n - 1}")
    seqs = [encode(s, vocab, line_id=i) for i, s in enumerate(data.smiles)]
    dtype = np.dtype(state.config.dtype)
    rng = np.random.default_rng(config.seed)

    if task == "regression":
        y = data.targets.astype(np.float64)
        mu = y[split["train"]].mean(axis=0)
        sd = y[split["train"]].std(axis=0)
        sd = np.where(sd > 0, sd, 1.0)
        y_fit = ((y - mu) / sd).astype(dtype)
        out_dim = y.shape[1]
    elif task == "classification":
        if data.targets.shape[1] != 1:
            raise LabelParse("classification expects exactly one target column")
        y = data.targets[:, 0]
        if np.any(y != np.round(y)) or np.any(y < 0):
            raise LabelParse("classification targets must be non-negative integers")
        y_fit = y.astype(np.int64)
        out_dim = max(int(y_fit.max()) + 1, 2)
        mu = sd = None
    else:
        raise ValidationError(f"unknown task type {task!r}")

    head = init_head(
        state.config.hidden, out_dim, config.head_hidden,
        task=task, dropout=config.head_dropout, seed=config.seed, dtype=state.config.dtype,
    )
    initial = embed_many(state, seqs).astype(dtype)
    frozen = initial if mode == "frozen" else None
    f_mu = f_sd = None
    if config.head_standardize:
        f_mu = initial[split["train"]].mean(axis=0)
        f_sd = initial[split["train"]].std(axis=0)
        f_sd = np.where(f_sd > 1e-12, f_sd, 1.0).astype(dtype)
        if frozen is not None:
            frozen = (frozen - f_mu) / f_sd
    opt = config.lamb(config.finetune_lr)

    def features(idx, train, drop_rng):
        if frozen is not None:
            return nn.Tensor(frozen[idx])
        ids, mask = pad_ids([seqs[i] for i in idx])
        x = pooled_embeddings(state, ids, mask, train=train, rng=drop_rng)
        return x if f_mu is None else (x - f_mu) / f_sd

    def loss_of(pred, idx):
        if task == "regression":
            return nn.mse(pred, y_fit[idx])
        return nn.cross_entropy_masked(pred, y_fit[idx], np.ones(len(idx)))

    def predict(idx):
        preds = [finetune_forward(head, features(b, False, None)).data for b in _batched(idx, 256)]
        return np.concatenate(preds, axis=0)

    def eval_loss(idx):
        return loss_of(nn.Tensor(predict(idx)), idx).item()

    def trainable():
        params = head.parameters()
        if mode == "finetuned":
            params = state.parameters() + params
        return params

    def snapshot():
        return {n: p.data.copy() for n, p in trainable()}

    best = (math.inf, -1, snapshot())
    history = []
    for epoch in range(config.finetune_epochs):
        order = rng.permutation(split["train"])
        losses = []
        for idx in _batched(order, config.finetune_batch_size):
            drop_rng = np.random.default_rng(int(rng.integers(0, 2**63)))
            head.zero_grad()
            state.zero_grad()
            with nn.Tape() as tape:
                pred = finetune_forward(head, features(idx, True, drop_rng), train=True, rng=drop_rng)
                loss = loss_of(pred, idx)
            nn.backward(loss, tape)
            lamb_step(trainable(), opt)
            losses.append(loss.item())
        val = eval_loss(split["valid"])
        history.append((epoch, float(np.mean(losses)), val))
        if val < best[0]:
            best = (val, epoch, snapshot())
    for name, p in trainable():
        p.data = best[2][name]
    head.zero_grad()
    state.zero_grad()

    test_idx = split["test"]
    raw = predict(test_idx)
    if task == "regression":
        preds = raw * sd + mu
        metrics = evaluate_metrics(preds, data.targets[test_idx], task)
    else:
        preds = raw
        metrics = evaluate_metrics(raw, y_fit[test_idx], task)
    return FinetuneResult(head, state, metrics, best[1], history, preds, mu, sd, f_mu, f_sd)
