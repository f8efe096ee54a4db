"""Loaders for the packaged benchmark result tables.

The CSVs in this package hold published multi-site benchmark numbers in long
form (method, dataset, task, metric, direction, value). They anchor the
regression tests for win counting and method ranking, and the ``ranks`` and
``report`` pipeline stages can render them next to freshly computed results.
"""

from __future__ import annotations

import csv
from importlib import resources

from ..core import MetricTable

FIXTURE_TABLES = (
    "indist_benchmark",
    "transfer_benchmark",
    "prompt_indist",
    "prompt_transfer",
    "summarizer_indist",
    "summarizer_transfer",
)


def fixture_text(name: str) -> str:
    if name not in FIXTURE_TABLES:
        raise KeyError(f"unknown fixture table {name!r}; choose from {FIXTURE_TABLES}")
    return resources.files(__name__).joinpath(f"{name}.csv").read_text("utf-8")


def load_fixture_table(name: str) -> MetricTable:
    """Parse one fixture CSV into a MetricTable.

    Task ids are composite "<dataset>/<task>" strings so each dataset-task
    pair is its own column, matching how the source tables count wins.
    """
    table = MetricTable()
    lines = [ln for ln in fixture_text(name).splitlines() if ln and not ln.startswith("#")]
    for row in csv.DictReader(lines):
        task_id = f"{row['dataset']}/{row['task']}"
        direction = row["direction"]
        if direction not in ("lower", "higher"):
            raise ValueError(f"{name}: bad direction {direction!r}")
        previous = table.direction.get(task_id)
        if previous is not None and previous != direction:
            raise ValueError(f"{name}: conflicting directions for {task_id}")
        table.direction[task_id] = direction
        table.set(row["method"], task_id, float(row["value"]))
    return table
