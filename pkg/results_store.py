import csv
import io
import logging
import os
import threading
from dataclasses import dataclass
from typing import Iterable, List, Optional, Set, Tuple

from utils import atomic_write_text, format_float

# Configure logging for production observability
logger = logging.getLogger(__name__)

RESULT_COLUMNS = ("scenario", "method", "variant", "beta", "seed", "lr", "auroc", "threshold", "wall_ms")
FAILURE_COLUMNS = ("scenario", "cell", "error")


def format_key(value: Optional[float]) -> str:
    """Shortest round-trip text for grid values; flat cells carry no beta."""
    return "" if value is None else repr(float(value))


@dataclass(frozen=True)
class ExperimentResult:
    scenario: str
    method: str
    variant: str
    beta: Optional[float]
    seed: int
    learning_rate: float
    auroc: float
    threshold: float
    wall_ms: int = 0
    score_dump: str = ""

    def __post_init__(self):
        if not (0.0 <= self.auroc <= 1.0):
            raise ValueError(f"AUROC {self.auroc} outside [0, 1]")

    @property
    def key(self) -> Tuple[str, str, str, str, int, str]:
        return (self.scenario, self.method, self.variant, format_key(self.beta),
                int(self.seed), format_key(self.learning_rate))

    @property
    def cell_key(self) -> Tuple[str, str, str, int, str]:
        return (self.scenario, self.variant, format_key(self.beta), int(self.seed), format_key(self.learning_rate))

    def to_row(self) -> List[str]:
        return [self.scenario, self.method, self.variant, format_key(self.beta), str(int(self.seed)),
                format_key(self.learning_rate), format_float(self.auroc), format_float(self.threshold),
                str(int(self.wall_ms))]


def _parse_row(row: dict) -> ExperimentResult:
    return ExperimentResult(
        scenario=row["scenario"],
        method=row["method"],
        variant=row["variant"],
        beta=float(row["beta"]) if row["beta"] else None,
        seed=int(row["seed"]),
        learning_rate=float(row["lr"]),
        auroc=float(row["auroc"]),
        threshold=float(row["threshold"]),
        wall_ms=int(row["wall_ms"] or 0),
    )


def read_results(path: str) -> List[ExperimentResult]:
    """Load a results CSV, checking the header."""
    if not os.path.exists(path):
        raise FileNotFoundError(f"results file not found: {path}")
    with open(path, "r", newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = set(RESULT_COLUMNS) - set(reader.fieldnames or [])
        if missing:
            raise ValueError(f"{path}: missing columns {', '.join(sorted(missing))}")
        return [_parse_row(row) for row in reader]


def _render(columns, rows) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(columns)
    writer.writerows(rows)
    return buffer.getvalue()


class ResultsStore:
    """
    Result persistence for experiment sweeps.
    Every write rewrites the whole file through an atomic rename, so an
    interrupted sweep leaves a valid CSV and resumes by skipping finished cells.
    """

    def __init__(self, output_dir: str):
        self.output_dir = output_dir
        self.results_path = os.path.join(output_dir, "results.csv")
        self.failures_path = os.path.join(output_dir, "failures.csv")
        self._lock = threading.Lock()
        os.makedirs(output_dir, exist_ok=True)

    def load(self) -> List[ExperimentResult]:
        if not os.path.exists(self.results_path):
            return []
        return read_results(self.results_path)

    def completed_cells(self) -> Set[Tuple]:
        return {r.cell_key for r in self.load()}

    def append(self, results: Iterable[ExperimentResult]) -> int:
        """Merge rows into results.csv; a row with an existing key replaces it."""
        results = list(results)
        with self._lock:
            merged = {r.key: r for r in self.load()}
            for r in results:
                merged[r.key] = r
            ordered = sorted(merged.values(), key=_sort_key)
            atomic_write_text(self.results_path, _render(RESULT_COLUMNS, [r.to_row() for r in ordered]))
        logger.info(f"Persisted {len(results)} result rows ({len(ordered)} total)")
        return len(results)

    def record_failure(self, scenario: str, cell: str, error: BaseException) -> None:
        message = f"{type(error).__name__}: {error}".replace("\n", " ")
        with self._lock:
            rows = []
            if os.path.exists(self.failures_path):
                with open(self.failures_path, "r", newline="", encoding="utf-8") as fh:
                    rows = [r for r in csv.reader(fh)][1:]
            rows = [r for r in rows if r[:2] != [scenario, cell]]
            rows.append([scenario, cell, message])
            rows.sort()
            atomic_write_text(self.failures_path, _render(FAILURE_COLUMNS, rows))
        logger.error(f"❌ Cell {scenario}/{cell} failed: {message}")

    def clear_failure(self, scenario: str, cell: str) -> None:
        with self._lock:
            if not os.path.exists(self.failures_path):
                return
            with open(self.failures_path, "r", newline="", encoding="utf-8") as fh:
                rows = [r for r in csv.reader(fh)][1:]
            kept = [r for r in rows if r[:2] != [scenario, cell]]
            if len(kept) != len(rows):
                atomic_write_text(self.failures_path, _render(FAILURE_COLUMNS, kept))


def _sort_key(r: ExperimentResult):
    beta = -1.0 if r.beta is None else r.beta
    return (r.scenario, r.method, r.variant, beta, r.seed, r.learning_rate)
