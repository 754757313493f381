import threading
import time

import pytest

from grid_runner import run_cells_parallel
from results_store import ExperimentResult, ResultsStore, format_key, read_results


def _result(seed=0, method="msp", variant="flat", beta=None, auc=0.5, lr=0.01):
    return ExperimentResult(scenario="A12", method=method, variant=variant, beta=beta, seed=seed,
                            learning_rate=lr, auroc=auc, threshold=-0.25, wall_ms=12)


class TestResultsStore:
    def test_append_and_load(self, tmp_path):
        store = ResultsStore(str(tmp_path))
        store.append([_result(1), _result(0, variant="hier", beta=10.0)])
        loaded = store.load()
        assert [(r.variant, r.seed) for r in loaded] == [("flat", 1), ("hier", 0)]
        assert loaded[0].beta is None
        assert loaded[1].beta == 10.0
        assert loaded[0].threshold == -0.25

    def test_same_key_replaces_row(self, tmp_path):
        store = ResultsStore(str(tmp_path))
        store.append([_result(0, auc=0.5)])
        store.append([_result(0, auc=0.75), _result(1)])
        assert [(r.seed, r.auroc) for r in store.load()] == [(0, 0.75), (1, 0.5)]

    def test_rows_are_sorted(self, tmp_path):
        store = ResultsStore(str(tmp_path))
        store.append([_result(2, method="odin"), _result(1, method="dmd"), _result(0, method="dmd")])
        assert [(r.method, r.seed) for r in store.load()] == [("dmd", 0), ("dmd", 1), ("odin", 2)]

    def test_completed_cells_ignore_method(self, tmp_path):
        store = ResultsStore(str(tmp_path))
        store.append([_result(0, method="msp"), _result(0, method="odin"), _result(3, variant="hier", beta=1.0)])
        assert store.completed_cells() == {
            ("A12", "flat", "", 0, "0.01"),
            ("A12", "hier", "1.0", 3, "0.01"),
        }

    def test_failures_are_recorded_and_cleared(self, tmp_path):
        store = ResultsStore(str(tmp_path))
        store.record_failure("A12", "flat_bnone_s0_lr0.01", RuntimeError("boom\nagain"))
        store.record_failure("A12", "flat_bnone_s0_lr0.01", RuntimeError("boom twice"))
        text = (tmp_path / "failures.csv").read_text(encoding="utf-8")
        assert text.splitlines() == ["scenario,cell,error", "A12,flat_bnone_s0_lr0.01,RuntimeError: boom twice"]
        store.clear_failure("A12", "flat_bnone_s0_lr0.01")
        assert (tmp_path / "failures.csv").read_text(encoding="utf-8") == "scenario,cell,error\n"

    def test_missing_results_file(self, tmp_path):
        assert ResultsStore(str(tmp_path)).load() == []
        with pytest.raises(FileNotFoundError):
            read_results(str(tmp_path / "results.csv"))

    def test_auroc_must_be_a_probability(self):
        with pytest.raises(ValueError):
            _result(auc=1.5)

    def test_format_key(self):
        assert format_key(None) == ""
        assert format_key(10) == "10.0"
        assert format_key(0.003) == "0.003"


class TestGridRunner:
    def test_results_follow_cell_order(self):
        def run(cell):
            time.sleep(0.01 * (5 - cell))
            return [cell * 10]

        outcome = run_cells_parallel(list(range(5)), run, workers=4)
        assert outcome.results == [0, 10, 20, 30, 40]
        assert outcome.failures == []

    def test_failure_does_not_stop_other_cells(self):
        seen, failed = [], []
        lock = threading.Lock()

        def run(cell):
            if cell == 2:
                raise ValueError("bad cell")
            return [cell]

        def on_success(cell, rows):
            with lock:
                seen.append(cell)

        outcome = run_cells_parallel([0, 1, 2, 3], run, workers=2, on_success=on_success,
                                     on_failure=lambda cell, e: failed.append((cell, str(e))))
        assert outcome.results == [0, 1, 3]
        assert sorted(seen) == [0, 1, 3]
        assert failed == [(2, "bad cell")]
        assert [c for c, _ in outcome.failures] == [2]

    def test_no_cells(self):
        outcome = run_cells_parallel([], lambda c: [c])
        assert outcome.results == [] and outcome.failures == []
