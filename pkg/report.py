"""Report rendering: box-plot data, curve summaries and one SVG page per scenario."""
import csv
import glob
import logging
import math
import os
import xml.etree.ElementTree as ET
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

from evaluation import box_stats, standardization_stats, standardize_scores, summarize
from ood_scores import read_score_dump
from results_store import ExperimentResult, format_key, read_results

logger = logging.getLogger(__name__)

GROUPS = ("f_msp", "h_msp", "f_odin", "h_odin", "f_dmd", "h_dmd")
BOX_COLUMNS = ("group", "n", "min", "q1", "median", "q3", "max")
SENSITIVITY_COLUMNS = ("method", "beta", "n", "min", "q1", "median", "q3", "max")
RANK_COLUMNS = ("variant", "population", "rank", "mean", "halfwidth", "cells")
STANDARDIZED_COLUMNS = ("method", "variant", "population", "n", "min", "q1", "median", "q3", "max")

SVG_NS = "http://www.w3.org/2000/svg"
PANEL_WIDTH = 860
PANEL_HEIGHT = 260
MARGIN = 50
COLORS = {"flat": "#4c72b0", "hier": "#dd8452", "known": "#55a868", "novel": "#c44e52"}


def _group_name(variant: str, method: str) -> str:
    return f"{variant[0]}_{method}"


def _in_betas(beta: Optional[float], betas: Sequence[float]) -> bool:
    return beta is not None and any(math.isclose(beta, b) for b in betas)


def _box_row(label: Sequence, values: Sequence[float]) -> List:
    s = box_stats(values)
    return list(label) + [s["n"], s["min"], s["q1"], s["median"], s["q3"], s["max"]]


def _write_csv(path: str, columns: Sequence[str], rows: Iterable[Sequence]) -> str:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        writer.writerows(rows)
    return path


def comparison_groups(results: Sequence[ExperimentResult], report_betas: Sequence[float]) -> Dict[str, List[float]]:
    """AUROC values per f_/h_ group; hierarchical cells are pooled over ``report_betas``."""
    groups: Dict[str, List[float]] = {g: [] for g in GROUPS}
    for r in results:
        if r.variant == "hier" and not _in_betas(r.beta, report_betas):
            continue
        groups.setdefault(_group_name(r.variant, r.method), []).append(r.auroc)
    return groups


def sensitivity_rows(results: Sequence[ExperimentResult]) -> List[List]:
    grouped: Dict[Tuple[str, float], List[float]] = {}
    for r in results:
        if r.variant == "hier":
            grouped.setdefault((r.method, r.beta), []).append(r.auroc)
    return [_box_row([method, format_key(beta)], values) for (method, beta), values in sorted(grouped.items())]


def _cell_included(variant: str, beta_text: str, report_betas: Sequence[float]) -> bool:
    if variant == "flat":
        return True
    return bool(beta_text) and _in_betas(float(beta_text), report_betas)


def rank_distance_rows(curve_dir: str, report_betas: Sequence[float]) -> List[List]:
    """Average the per-cell rank-distance curves of one scenario."""
    cell_means: Dict[Tuple[str, str, int], List[float]] = {}
    for path in sorted(glob.glob(os.path.join(curve_dir, "*.csv"))):
        with open(path, "r", newline="", encoding="utf-8") as fh:
            for row in csv.DictReader(fh):
                if not _cell_included(row["variant"], row["beta"], report_betas):
                    continue
                mean = float(row["mean"])
                if math.isnan(mean):
                    continue
                key = (row["variant"], row["population"], int(row["rank"]))
                cell_means.setdefault(key, []).append(mean)
    rows = []
    for (variant, population, rank), values in sorted(cell_means.items()):
        mean, half = summarize(values)
        rows.append([variant, population, rank, mean, half, len(values)])
    return rows


def standardized_rows(score_dir: str, report_betas: Sequence[float]) -> List[List]:
    """Test scores standardized with their own cell's validation mean and std, pooled over cells."""
    pooled: Dict[Tuple[str, str, str], List[float]] = {}
    for path in sorted(glob.glob(os.path.join(score_dir, "*.csv"))):
        by_method: Dict[Tuple[str, str], list] = {}
        for rec in read_score_dump(path):
            if rec.variant == "hier" and not _in_betas(rec.beta, report_betas):
                continue
            by_method.setdefault((rec.method, rec.variant), []).append(rec)
        for (method, variant), records in by_method.items():
            val = [r.score for r in records if r.split == "val"]
            try:
                mean, std = standardization_stats(val)
                for population, novel in (("known", False), ("novel", True)):
                    scores = [r.score for r in records if r.split == "test" and r.is_novel == novel]
                    if scores:
                        pooled.setdefault((method, variant, population), []).extend(
                            standardize_scores(scores, mean, std).tolist())
            except ValueError as e:
                logger.warning(f"⚠️ Skipping {method}/{variant} in {os.path.basename(path)}: {e}")
    return [_box_row(key, values) for key, values in sorted(pooled.items())]


class _Panel:
    """Axes box with a linear y mapping; x positions are handed in by the caller."""

    def __init__(self, svg: ET.Element, top: float, title: str, y_range: Tuple[float, float]):
        self.svg, self.top = svg, top
        lo, hi = y_range
        if not (math.isfinite(lo) and math.isfinite(hi)):
            lo, hi = 0.0, 1.0
        if hi - lo < 1e-12:
            lo, hi = lo - 0.5, hi + 0.5
        pad = 0.05 * (hi - lo)
        self.lo, self.hi = lo - pad, hi + pad
        self.left, self.right = MARGIN, PANEL_WIDTH - MARGIN / 2
        self.bottom = top + PANEL_HEIGHT - MARGIN
        ET.SubElement(svg, "rect", x=_f(self.left), y=_f(top + 25), width=_f(self.right - self.left),
                      height=_f(self.bottom - top - 25), fill="none", stroke="#333333")
        _text(svg, self.left, top + 18, title, size=14, weight="bold")
        _text(svg, self.left - 6, top + 30, f"{self.hi:.3g}", size=10, anchor="end")
        _text(svg, self.left - 6, self.bottom, f"{self.lo:.3g}", size=10, anchor="end")

    def y(self, value: float) -> float:
        frac = (value - self.lo) / (self.hi - self.lo)
        return self.bottom - frac * (self.bottom - self.top - 25)

    def x(self, frac: float) -> float:
        return self.left + frac * (self.right - self.left)


def _f(v: float) -> str:
    return f"{v:.2f}"


def _text(parent: ET.Element, x: float, y: float, text: str, size: int = 11,
          anchor: str = "start", weight: str = "normal") -> None:
    node = ET.SubElement(parent, "text", x=_f(x), y=_f(y), attrib={
        "font-family": "sans-serif", "font-size": str(size), "text-anchor": anchor, "font-weight": weight})
    node.text = text


def _draw_boxes(panel: _Panel, boxes: Sequence[Tuple[str, dict, str]]) -> None:
    slot = 1.0 / max(len(boxes), 1)
    for i, (label, s, color) in enumerate(boxes):
        cx = panel.x((i + 0.5) * slot)
        _text(panel.svg, cx, panel.bottom + 16, label, size=10, anchor="middle")
        if s["n"] == 0:
            continue
        half = 0.3 * slot * (panel.right - panel.left)
        ET.SubElement(panel.svg, "line", x1=_f(cx), x2=_f(cx), y1=_f(panel.y(s["min"])),
                      y2=_f(panel.y(s["max"])), stroke="#333333")
        ET.SubElement(panel.svg, "rect", x=_f(cx - half), y=_f(panel.y(s["q3"])), width=_f(2 * half),
                      height=_f(max(panel.y(s["q1"]) - panel.y(s["q3"]), 0.5)), fill=color,
                      stroke="#333333", attrib={"fill-opacity": "0.7"})
        ET.SubElement(panel.svg, "line", x1=_f(cx - half), x2=_f(cx + half), y1=_f(panel.y(s["median"])),
                      y2=_f(panel.y(s["median"])), stroke="#000000", attrib={"stroke-width": "2"})


def _draw_curves(panel: _Panel, rows: Sequence[Sequence]) -> None:
    series: Dict[Tuple[str, str], List[Tuple[int, float]]] = {}
    for variant, population, rank, mean, _, _ in rows:
        series.setdefault((variant, population), []).append((rank, mean))
    ranks = [r[2] for r in rows]
    lo, hi = (min(ranks), max(ranks)) if ranks else (2, 3)
    span = max(hi - lo, 1)
    for n, ((variant, population), points) in enumerate(sorted(series.items())):
        points.sort()
        coords = " ".join(f"{_f(panel.x((r - lo) / span))},{_f(panel.y(m))}" for r, m in points)
        attrib = {"stroke-width": "2"}
        if variant == "flat":
            attrib["stroke-dasharray"] = "6 4"
        ET.SubElement(panel.svg, "polyline", points=coords, fill="none", stroke=COLORS[population], attrib=attrib)
        _text(panel.svg, panel.right - 8, panel.top + 42 + 14 * n, f"{variant} {population}",
              size=10, anchor="end")
    _text(panel.svg, panel.x(0.5), panel.bottom + 16, "prediction rank", size=10, anchor="middle")


def render_svg(scenario: str, groups: Dict[str, List[float]], rank_rows: Sequence[Sequence],
               std_rows: Sequence[Sequence]) -> ET.ElementTree:
    height = 3 * PANEL_HEIGHT + 40
    svg = ET.Element("svg", xmlns=SVG_NS, width=str(PANEL_WIDTH), height=str(height),
                     viewBox=f"0 0 {PANEL_WIDTH} {height}")
    _text(svg, PANEL_WIDTH / 2, 24, f"Novel fault detection: leave out {scenario}", size=16,
          anchor="middle", weight="bold")

    auroc_boxes = [(g, box_stats(groups.get(g, [])), COLORS["flat" if g.startswith("f_") else "hier"])
                   for g in GROUPS]
    _draw_boxes(_Panel(svg, 40, "AUROC", (0.0, 1.0)), auroc_boxes)

    means = [r[3] for r in rank_rows]
    curve_panel = _Panel(svg, 40 + PANEL_HEIGHT, "Distance to top prediction by rank",
                         (min(means, default=0.0), max(means, default=1.0)))
    _draw_curves(curve_panel, rank_rows)

    std_boxes = [(f"{r[1][0]}_{r[0]} {r[2]}", dict(zip(BOX_COLUMNS[1:], r[3:])), COLORS[r[2]]) for r in std_rows]
    finite = [v for r in std_rows for v in r[4:] if isinstance(v, float) and math.isfinite(v)]
    std_panel = _Panel(svg, 40 + 2 * PANEL_HEIGHT, "Standardized test scores",
                       (min(finite, default=-1.0), max(finite, default=1.0)))
    _draw_boxes(std_panel, std_boxes)
    return ET.ElementTree(svg)


def render_report(results_path: str, out_dir: Optional[str] = None,
                  report_betas: Sequence[float] = (10.0, 100.0)) -> List[str]:
    """
    Summaries for every scenario in a results CSV.
    Score dumps and curves are read from the ``scores/`` and ``curves/``
    folders next to the results file. Returns the paths written.
    """
    results = read_results(results_path)
    if not results:
        raise ValueError(f"{results_path}: results file has no rows")
    base_dir = os.path.dirname(os.path.abspath(results_path))
    out_dir = out_dir or os.path.join(base_dir, "report")
    os.makedirs(out_dir, exist_ok=True)

    written = []
    scenarios = sorted({r.scenario for r in results})
    logger.info(f"📝 Rendering report for {len(scenarios)} scenario(s) into {out_dir}")
    for scenario in scenarios:
        rows = [r for r in results if r.scenario == scenario]
        groups = comparison_groups(rows, report_betas)
        written.append(_write_csv(os.path.join(out_dir, f"auroc_box_{scenario}.csv"), BOX_COLUMNS,
                                  [_box_row([g], groups[g]) for g in GROUPS]))
        written.append(_write_csv(os.path.join(out_dir, f"sensitivity_{scenario}.csv"), SENSITIVITY_COLUMNS,
                                  sensitivity_rows(rows)))
        rank_rows = rank_distance_rows(os.path.join(base_dir, "curves", scenario), report_betas)
        written.append(_write_csv(os.path.join(out_dir, f"rank_distance_{scenario}.csv"), RANK_COLUMNS, rank_rows))
        std_rows = standardized_rows(os.path.join(base_dir, "scores", scenario), report_betas)
        written.append(_write_csv(os.path.join(out_dir, f"standardized_{scenario}.csv"), STANDARDIZED_COLUMNS,
                                  std_rows))

        svg_path = os.path.join(out_dir, f"report_{scenario}.svg")
        render_svg(scenario, groups, rank_rows, std_rows).write(svg_path, encoding="utf-8", xml_declaration=True)
        written.append(svg_path)
        logger.info(f"✅ Report for {scenario}: {len(rows)} result rows")
    return written
