import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional

import numpy as np

from backbone import Model
from configuration import Configuration
from tensor_core import backward, default_dtype, new_tape, no_grad
from trainer.checkpoint import Checkpoint
from trainer.corpus import Batch, BatchSampler, ByteCorpus, validation_batches
from trainer.metrics import MetricsHandler
from trainer.optimizer import AdamW, clip_grad_norm, lr_at

BETA_HISTOGRAM_BINS = 10


class TrainingAbortedError(Exception):

    def __init__(self, message: str, step: int, layer: Optional[str] = None):
        super().__init__(message)
        self.step = step
        self.layer = layer


@dataclass
class StepResult:
    loss: float
    grad_norm: float
    lr: float
    mean_betas: List[Optional[float]] = field(default_factory=list)


@dataclass
class EvalResult:
    loss: float
    perplexity: float
    layer_betas: List[Optional[np.ndarray]] = field(default_factory=list)


@dataclass
class BetaSummary:
    layer: int
    minimum: float
    mean: float
    maximum: float
    histogram: List[int]


@dataclass
class TrainingSummary:
    step: int
    train_loss: Optional[float]
    val_loss: Optional[float]
    perplexity: Optional[float]


def build_model(config: Configuration) -> Model:
    with default_dtype(config.train.precision.value):
        return Model(config.model, config.ddl, np.random.default_rng(config.train.seed))


def locate_non_finite(model: Model, inputs: np.ndarray) -> str:
    """Name of the first stage whose forward output is not finite."""
    with no_grad():
        x = model.embed(inputs)
        if not np.all(np.isfinite(x.data)):
            return "embedding"
        for i, layer in enumerate(model.layers):
            x = layer(x)
            if not np.all(np.isfinite(x.data)):
                return f"layers.{i}"
    return "head"


def train_step(model: Model, batch: Batch, optimizer: AdamW, cfg, step: int) -> StepResult:
    """Forward, backward, global-norm clipping and one AdamW update at the scheduled learning rate."""
    inputs, targets = batch
    model.zero_grad()
    with new_tape():
        loss = model.loss(inputs, targets)
        loss_value = loss.item()
        if not math.isfinite(loss_value):
            layer = locate_non_finite(model, inputs)
            raise TrainingAbortedError(f"Non-finite loss {loss_value} at step {step}, first bad output in {layer}",
                                       step=step, layer=layer)
        backward(loss)
    for name, param in model.named_parameters():
        if param.grad is not None and not np.all(np.isfinite(param.grad)):
            raise TrainingAbortedError(f"Non-finite gradient at step {step} in parameter {name}", step=step,
                                       layer=name)
    grad_norm = clip_grad_norm(optimizer.params, cfg.grad_clip)
    lr = lr_at(step, cfg)
    optimizer.step(lr)
    return StepResult(loss=loss_value, grad_norm=grad_norm, lr=lr, mean_betas=model.mean_betas())


def _batch_loss(model: Model, batch: Batch) -> float:
    with no_grad():
        return model.loss(*batch).item()


def evaluate(model: Model, batches: List[Batch], threads: int = 1, collect_betas: bool = False) -> EvalResult:
    """
    Mean token cross-entropy over the given batches and its perplexity.

    Batch losses may be computed on several threads; they are reduced in batch order.
    """
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as executor:
            losses = list(executor.map(lambda batch: _batch_loss(model, batch), batches))
    else:
        losses = [_batch_loss(model, batch) for batch in batches]
    loss = float(np.mean(np.array(losses, dtype=np.float64)))
    layer_betas: List[Optional[np.ndarray]] = []
    if collect_betas:
        collected: List[List[np.ndarray]] = [[] for _ in model.layers]
        for batch in batches:
            _batch_loss(model, batch)
            for i, betas in enumerate(model.layer_betas()):
                if betas is not None:
                    collected[i].append(betas)
        layer_betas = [np.concatenate(parts) if parts else None for parts in collected]
    return EvalResult(loss=loss, perplexity=math.exp(loss), layer_betas=layer_betas)


def beta_summary(layer_betas: List[Optional[np.ndarray]]) -> List[BetaSummary]:
    """Per-layer min, mean, max and a histogram of the gate over (0, 2)."""
    summaries = []
    for i, betas in enumerate(layer_betas):
        if betas is None:
            continue
        counts, _ = np.histogram(betas, bins=BETA_HISTOGRAM_BINS, range=(0.0, 2.0))
        summaries.append(BetaSummary(layer=i, minimum=float(np.min(betas)), mean=float(np.mean(betas)),
                                     maximum=float(np.max(betas)), histogram=[int(c) for c in counts]))
    return summaries


class Trainer:
    """
    Training loop over a byte corpus with periodic validation, metrics rows and checkpoints.

    Runs with the same configuration, corpus and seed are deterministic: their checkpoints and every metrics
    column except wall_ms (elapsed wall-clock time) match exactly.
    """

    def __init__(self, config: Configuration, corpus: ByteCorpus, metrics: Optional[MetricsHandler] = None):
        self.config = config.validate()
        self.model = build_model(config)
        self.optimizer = AdamW.from_config(list(self.model.named_parameters()), config.train)
        seq_len = config.context_length
        self.sampler = BatchSampler(corpus.train, config.train.batch_size, seq_len, seed=config.train.seed)
        self.validation = validation_batches(corpus.validation, config.train.eval_batches, config.train.batch_size,
                                             seq_len)
        self.metrics = metrics
        self.step = 0
        self.last_train_loss: Optional[float] = None
        self.last_eval: Optional[EvalResult] = None

    def checkpoint(self) -> Checkpoint:
        return Checkpoint(config=self.config.to_dict(), step=self.step,
                          params={name: np.array(data, copy=True) for name, data in self.model.state_dict().items()},
                          optimizer=self.optimizer.state_dict(), rng_state=self.sampler.get_state())

    def restore(self, checkpoint: Checkpoint) -> None:
        self.model.load_state_dict(checkpoint.params)
        self.optimizer.load_state_dict(checkpoint.optimizer)
        self.sampler.set_state(checkpoint.rng_state)
        self.step = int(checkpoint.step)
        logging.info(f"Resumed training from step {self.step}")

    def evaluate(self, collect_betas: bool = False) -> EvalResult:
        with default_dtype(self.config.train.precision.value):
            return evaluate(self.model, self.validation, threads=self.config.train.threads,
                            collect_betas=collect_betas)

    def run(self, steps: Optional[int] = None,
            on_checkpoint: Optional[Callable[[Checkpoint], None]] = None) -> TrainingSummary:
        """
        Train until `steps` optimizer updates have been applied in total (default: the configured step count),
        evaluating every eval_interval steps and at the end.
        """
        cfg = self.config.train
        total = cfg.steps if steps is None else steps
        started = time.time()
        with default_dtype(cfg.precision.value):
            while self.step < total:
                result = train_step(self.model, self.sampler.sample(), self.optimizer, cfg, self.step)
                self.step += 1
                self.last_train_loss = result.loss
                val_loss = None
                if self.step == total or (cfg.eval_interval and self.step % cfg.eval_interval == 0):
                    self.last_eval = self.evaluate()
                    val_loss = self.last_eval.loss
                if cfg.log_interval and (self.step % cfg.log_interval == 0 or self.step == total):
                    logging.info(f"Training step {self.step}/{total}, loss {result.loss:.4f}, lr {result.lr:.2e}")
                self._write_row(result, val_loss, started)
                if on_checkpoint and self.config.checkpoint.save_interval and \
                        self.step % self.config.checkpoint.save_interval == 0 and self.step < total:
                    on_checkpoint(self.checkpoint())
        if on_checkpoint:
            on_checkpoint(self.checkpoint())
        val = self.last_eval
        return TrainingSummary(step=self.step, train_loss=self.last_train_loss, val_loss=val.loss if val else None,
                               perplexity=val.perplexity if val else None)

    def _write_row(self, result: StepResult, val_loss: Optional[float], started: float) -> None:
        if self.metrics is None:
            return
        row: Dict = {"step": self.step, "train_loss": result.loss, "val_loss": val_loss, "lr": result.lr,
                     "grad_norm": result.grad_norm, "wall_ms": int(round((time.time() - started) * 1000))}
        for i, mean_beta in enumerate(result.mean_betas):
            row[f"mean_beta_{i}"] = mean_beta
        self.metrics.writerow(row)
