import time
import logging
import concurrent.futures
from dataclasses import dataclass, field
from typing import Callable, Generic, List, Sequence, Tuple, TypeVar

logger = logging.getLogger(__name__)

CellT = TypeVar("CellT")
ResultT = TypeVar("ResultT")


@dataclass
class GridOutcome(Generic[CellT, ResultT]):
    results: List[ResultT] = field(default_factory=list)
    failures: List[Tuple[CellT, BaseException]] = field(default_factory=list)


def run_cells_parallel(
    cells: Sequence[CellT],
    run_cell: Callable[[CellT], List[ResultT]],
    workers: int = 1,
    on_success: Callable[[CellT, List[ResultT]], None] = None,
    on_failure: Callable[[CellT, BaseException], None] = None,
    label: Callable[[CellT], str] = str,
) -> GridOutcome:
    """
    Run independent grid cells on a thread pool.
    A failing cell is logged and reported through ``on_failure``; the others
    proceed. Results come back in the order of ``cells``.
    """
    outcome: GridOutcome = GridOutcome()
    if not cells:
        logger.info("No grid cells to run")
        return outcome

    logger.info(f"🚀 Running {len(cells)} grid cells on {workers} worker(s)")
    start_time = time.time()
    by_index = {}

    with concurrent.futures.ThreadPoolExecutor(max_workers=max(1, workers)) as executor:
        future_to_cell = {executor.submit(run_cell, cell): (idx, cell) for idx, cell in enumerate(cells)}

        completed_count = 0
        for future in concurrent.futures.as_completed(future_to_cell):
            idx, cell = future_to_cell[future]
            completed_count += 1
            try:
                cell_results = future.result()
            except Exception as e:
                logger.error(f"❌ Cell {label(cell)} failed: {e}", exc_info=True)
                outcome.failures.append((cell, e))
                if on_failure is not None:
                    on_failure(cell, e)
                continue
            by_index[idx] = cell_results
            if on_success is not None:
                on_success(cell, cell_results)
            logger.info(f"   📊 Progress: {completed_count}/{len(cells)} cells done ({label(cell)})")

    for idx in sorted(by_index):
        outcome.results.extend(by_index[idx])

    total_time = time.time() - start_time
    logger.info(f"✅ Grid complete in {total_time:.1f}s: "
                f"{len(by_index)} succeeded, {len(outcome.failures)} failed")
    return outcome
