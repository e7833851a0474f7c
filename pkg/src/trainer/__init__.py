from .checkpoint import Checkpoint, CheckpointFormatError, load_checkpoint, save_checkpoint  # noqa
from .corpus import ByteCorpus, BatchSampler, CorpusError, ingest_corpus, validation_batches  # noqa
from .metrics import MetricsHandler, metric_columns, read_metrics, reproducible_columns  # noqa
from .optimizer import AdamW, clip_grad_norm, global_grad_norm, lr_at  # noqa
from .trainer import (EvalResult, StepResult, Trainer, TrainingAbortedError, TrainingSummary, beta_summary,  # noqa
                      build_model, evaluate, train_step)
