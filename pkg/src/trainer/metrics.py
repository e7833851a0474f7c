import copy
import csv
import os
from typing import Dict, Iterable, List, Optional

from keboola.component.dao import TableDefinition
from keboola.csvwriter import ElasticDictWriter

LEADING_COLUMNS = ["step", "train_loss", "val_loss", "lr", "grad_norm"]
TRAILING_COLUMNS = ["wall_ms"]
# elapsed wall-clock time, differs between otherwise identical runs
WALL_CLOCK_COLUMNS = ("wall_ms",)


def metric_columns(n_layers: int) -> List[str]:
    return LEADING_COLUMNS + [f"mean_beta_{i}" for i in range(n_layers)] + TRAILING_COLUMNS


def reproducible_columns(n_layers: int) -> List[str]:
    """Columns that match exactly between two runs with the same configuration and seed."""
    return [column for column in metric_columns(n_layers) if column not in WALL_CLOCK_COLUMNS]


def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


class MetricsHandler:
    """
    Append-only metrics table with a header fixed when the handler is created.

    Standalone files carry the header line. Output tables of a component run (table_definition given) are written
    without it, their columns travel in the manifest.
    """

    def __init__(self, path: str, n_layers: int, table_definition: Optional[TableDefinition] = None):
        self.path = path
        self.table_definition = table_definition
        self.columns = metric_columns(n_layers)
        directory = os.path.dirname(path)
        if directory:
            os.makedirs(directory, exist_ok=True)
        self.writer = ElasticDictWriter(path, self.columns)
        if table_definition is None:
            self.writer.writeheader()

    @property
    def has_header(self) -> bool:
        return self.table_definition is None

    @classmethod
    def continue_from(cls, path: str, n_layers: int, up_to_step: int,
                      table_definition: Optional[TableDefinition] = None,
                      previous_path: Optional[str] = None) -> "MetricsHandler":
        """Reopen a table, keeping rows of steps <= up_to_step. Earlier rows come from previous_path (default:
        path itself)."""
        previous_path = previous_path or path
        columns = None if table_definition is None else metric_columns(n_layers)
        previous = read_metrics(previous_path, columns) if os.path.isfile(previous_path) else []
        handler = cls(path, n_layers, table_definition)
        handler.writerows(row for row in previous if int(row["step"]) <= up_to_step)
        return handler

    def writerow(self, row: Dict) -> None:
        unknown = set(row) - set(self.columns)
        if unknown:
            raise KeyError(f"Metrics row has columns outside the fixed header: {sorted(unknown)}")
        self.writer.writerow({column: _cell(row.get(column)) for column in self.columns})

    def writerows(self, rows: Iterable[Dict]) -> None:
        for row in rows:
            self.writerow(row)

    def close_writer(self) -> None:
        self.writer.close()

    @property
    def writer_fields(self) -> List[str]:
        return copy.copy(self.writer.fieldnames)


def read_metrics(path: str, columns: Optional[List[str]] = None) -> List[Dict[str, str]]:
    """Rows of a metrics table; pass columns for a headerless table."""
    with open(path, newline="") as metrics_file:
        return list(csv.DictReader(metrics_file, fieldnames=columns))
