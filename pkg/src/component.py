"""
Training run inside a Keboola data directory.

Reads the corpus from in/files, writes the metrics table to out/tables with its manifest and the checkpoint to
out/files. The state file remembers the last completed step so a follow-up run with the checkpoint mapped into
in/files continues where the previous one stopped.
"""
import logging
import os
from typing import Optional

from keboola.component.base import ComponentBase, sync_action
from keboola.component.dao import SupportedDataTypes
from keboola.component.exceptions import UserException
from keboola.component.sync_actions import MessageType, ValidationResult
from keboola.component.table_schema import FieldSchema, TableSchema

from backbone import BackboneError
from configuration import Configuration
from delta_op import DeltaOperatorError
from state_expansion import ExpansionError
from tensor_core import TensorError
from trainer import (ByteCorpus, CheckpointFormatError, CorpusError, MetricsHandler, Trainer, TrainingAbortedError,
                     load_checkpoint, metric_columns, save_checkpoint)
from verify import run_suite

DEFAULT_CORPUS_FILE = "corpus.txt"
METRICS_TABLE = "metrics"
INTEGER_COLUMNS = ("step", "wall_ms")


class Component(ComponentBase):

    def __init__(self):
        super().__init__()
        self._configuration: Configuration
        self.state: dict = {}

    def run(self):
        self._init_configuration()
        self.state = self.get_state_file()

        corpus = self._load_corpus()
        n_layers = self._configuration.model.n_layers
        table_definition = self.create_out_table_definition_from_schema(self._metrics_schema(n_layers),
                                                                        incremental=False)
        checkpoint_path = os.path.join(self.files_out_path, self._configuration.checkpoint.file_name)

        try:
            trainer = Trainer(self._configuration, corpus)
            resumed_step = self._resume(trainer)
            if resumed_step:
                previous_table = os.path.join(self.tables_in_path, f"{METRICS_TABLE}.csv")
                metrics = MetricsHandler.continue_from(table_definition.full_path, n_layers, resumed_step,
                                                       table_definition, previous_path=previous_table)
            else:
                metrics = MetricsHandler(table_definition.full_path, n_layers, table_definition)
            trainer.metrics = metrics
            summary = trainer.run(on_checkpoint=lambda checkpoint: save_checkpoint(checkpoint_path, checkpoint))
        except (CorpusError, CheckpointFormatError, TrainingAbortedError, BackboneError, ExpansionError,
                DeltaOperatorError, TensorError) as e:
            raise UserException(e) from e

        metrics.close_writer()
        self.write_manifest(table_definition)

        self.state["last_step"] = summary.step
        self.state["checkpoint"] = self._configuration.checkpoint.file_name
        self.state["val_loss"] = summary.val_loss
        self.write_state_file(self.state)
        if summary.val_loss is not None:
            logging.info(f"Finished at step {summary.step}, validation loss {summary.val_loss:.4f}, "
                         f"perplexity {summary.perplexity:.2f}")

    def _init_configuration(self):
        self.validate_configuration_parameters(Configuration.get_dataclass_required_parameters())
        try:
            self._configuration: Configuration = Configuration.load_from_dict(self.configuration.parameters)
        except ValueError as e:
            raise UserException(f"Invalid configuration value: {e}. Please make sure all configured "
                                f"values are among the supported options.") from e
        self._configuration.validate()

    def _load_corpus(self) -> ByteCorpus:
        corpus_path = self._configuration.data.corpus_path or DEFAULT_CORPUS_FILE
        if not os.path.isabs(corpus_path):
            corpus_path = os.path.join(self.files_in_path, corpus_path)
        try:
            return ByteCorpus.from_file(corpus_path, self._configuration.data.validation_fraction)
        except CorpusError as e:
            raise UserException(e) from e

    def _resume(self, trainer: Trainer) -> int:
        last_step: Optional[int] = self.state.get("last_step")
        if not self._configuration.checkpoint.resume or not last_step:
            return 0
        checkpoint_path = os.path.join(self.files_in_path, self.state.get("checkpoint")
                                       or self._configuration.checkpoint.file_name)
        if not os.path.isfile(checkpoint_path):
            logging.warning(f"State points to step {last_step} but no checkpoint was found at {checkpoint_path}, "
                            f"training from scratch")
            return 0
        trainer.restore(load_checkpoint(checkpoint_path))
        return trainer.step

    @staticmethod
    def _metrics_schema(n_layers: int) -> TableSchema:
        fields = [FieldSchema(name=column, description="",
                              base_type=SupportedDataTypes.INTEGER if column in INTEGER_COLUMNS
                              else SupportedDataTypes.NUMERIC)
                  for column in metric_columns(n_layers)]
        return TableSchema(name=METRICS_TABLE, primary_keys=["step"], fields=fields)

    @sync_action('verifyOperator')
    def verify_operator(self) -> ValidationResult:
        reports = run_suite(seed=0, fast=True)
        failed = sorted({report.check for report in reports if not report.passed})
        if failed:
            return ValidationResult(f"Failed checks: {', '.join(failed)}", MessageType.DANGER)
        return ValidationResult(f"All {len(reports)} checks passed", MessageType.SUCCESS)


if __name__ == "__main__":
    try:
        comp = Component()
        # this triggers the run method by default and is controlled by the configuration.action parameter
        comp.execute_action()
    except UserException as exc:
        logging.exception(exc)
        exit(1)
    except Exception as exc:
        logging.exception(exc)
        exit(2)
