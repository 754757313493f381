import os
import csv
import time
import logging
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

from classifier import (
    ArchitectureSpec,
    ClassifierModel,
    TrainConfig,
    forward_batch,
    init_model,
    load_checkpoint,
    predict,
    save_checkpoint,
    train,
)
from config import RECOMMENDED_BETA, ExperimentConfig, GeneratorSection, TrainingSection
from dataset import (
    GeneratorSpec,
    LabeledDataset,
    STEEL_SAMPLE_SIZES,
    generate_synthetic,
    leave_out_class,
    load_csv,
    steel_taxonomy,
    stratified_split,
)
from evaluation import auroc, calibrate_threshold, rank_distance_curve, u1u2_summary
from grid_runner import run_cells_parallel
from ood_scores import GaussianBank, dmd_fit, score_dataset, write_score_dump
from report import SENSITIVITY_COLUMNS, sensitivity_rows
from results_store import ExperimentResult, ResultsStore, format_key
from taxonomy import (
    SoftLabelMatrix,
    TaxonomyError,
    TaxonomyTree,
    one_hot_matrix,
    parse_taxonomy,
    prune_leaf,
    serialize_taxonomy,
    soft_label_matrix,
)
from utils import derive_seed

logger = logging.getLogger(__name__)

CURVE_COLUMNS = ("variant", "beta", "seed", "lr", "population", "rank", "mean", "halfwidth")
U1U2_COLUMNS = ("variant", "beta", "seed", "lr", "population", "n", "u1_mean", "u1_halfwidth", "u2_mean", "u2_halfwidth")


@dataclass(frozen=True)
class ScenarioSpec:
    left_out: str
    detectors: Tuple[str, ...] = ("msp", "odin", "dmd")
    variants: Tuple[str, ...] = ("flat", "hier")
    betas: Tuple[float, ...] = (RECOMMENDED_BETA,)
    seeds: Tuple[int, ...] = tuple(range(10))
    learning_rates: Tuple[float, ...] = (0.003, 0.01, 0.03)
    temperature: float = 1000.0
    epsilon: float = 0.0012
    alpha: float = 0.05
    training: TrainingSection = field(default_factory=TrainingSection, hash=False)
    split: Tuple[float, ...] = (0.6, 0.2, 0.2)
    dmd_label_mode: str = "true"

    def validate(self, tree: TaxonomyTree) -> "ScenarioSpec":
        if self.left_out not in tree.leaf_names:
            raise ValueError(f"unknown leaf '{self.left_out}' in scenario")
        known = prune_leaf(tree, tree.leaf_of(self.left_out))
        if not known.uniform_depth:
            raise TaxonomyError(f"leaving out '{self.left_out}' leaves known classes at unequal depths")
        if not self.detectors or not self.variants or not self.seeds or not self.learning_rates:
            raise ValueError("scenario detector, variant, seed and learning-rate sets must be nonempty")
        if "hier" in self.variants and not self.betas:
            raise ValueError("the hier variant needs at least one beta")
        return self


@dataclass(frozen=True)
class GridCell:
    scenario: str
    variant: str
    beta: Optional[float]
    seed: int
    learning_rate: float

    @property
    def key(self) -> Tuple[str, str, str, int, str]:
        return (self.scenario, self.variant, format_key(self.beta), int(self.seed), format_key(self.learning_rate))

    @property
    def name(self) -> str:
        beta = format_key(self.beta) or "none"
        return f"{self.variant}_b{beta}_s{self.seed}_lr{format_key(self.learning_rate)}"


@dataclass(frozen=True)
class ScenarioData:
    name: str
    full_tree: TaxonomyTree
    known_tree: TaxonomyTree
    train: LabeledDataset
    val: LabeledDataset
    test: LabeledDataset
    novel: LabeledDataset


def scenario_from_config(cfg: ExperimentConfig, left_out: str, betas: Optional[Sequence[float]] = None) -> ScenarioSpec:
    return ScenarioSpec(
        left_out=left_out,
        detectors=tuple(cfg.detectors),
        variants=tuple(cfg.variants),
        betas=tuple(float(b) for b in (betas if betas is not None else cfg.betas)),
        seeds=tuple(int(s) for s in cfg.seeds),
        learning_rates=tuple(float(lr) for lr in cfg.learning_rates),
        temperature=cfg.temperature,
        epsilon=cfg.epsilon,
        alpha=cfg.alpha,
        training=cfg.training,
        split=tuple(cfg.split),
        dmd_label_mode=cfg.dmd_label_mode,
    )


def generator_spec(section: GeneratorSection, seed: Optional[int] = None) -> GeneratorSpec:
    return GeneratorSpec(
        feature_dim=section.feature_dim,
        counts=dict(section.counts) if section.counts is not None else dict(STEEL_SAMPLE_SIZES),
        parent_spread=section.parent_spread,
        child_spread=section.child_spread,
        noise=section.noise,
        seed=section.seed if seed is None else seed,
        default_count=section.default_count,
    )


def load_taxonomy(cfg: ExperimentConfig) -> TaxonomyTree:
    if not cfg.taxonomy_path:
        return steel_taxonomy()
    with open(cfg.taxonomy_path, "r", encoding="utf-8") as fh:
        return parse_taxonomy(fh.read())


def load_dataset(cfg: ExperimentConfig, tree: TaxonomyTree) -> LabeledDataset:
    if cfg.data_path:
        logger.info(f"📊 Loading dataset from {cfg.data_path}")
        return load_csv(cfg.data_path, tree)
    return generate_synthetic(tree, generator_spec(cfg.generator))


def prepare_scenario(dataset: LabeledDataset, left_out: str, fractions: Sequence[float],
                     master_seed: int) -> ScenarioData:
    """Leave one class out, then split the known classes into train/val/test."""
    leaf = dataset.tree.leaf_of(left_out)
    known, novel = leave_out_class(dataset, leaf)
    train_ds, val_ds, test_ds = stratified_split(known, fractions, seed=derive_seed(master_seed, "split", left_out))
    logger.info(f"Scenario {left_out}: train={train_ds.size}, val={val_ds.size}, "
                f"test={test_ds.size}, novel={novel.size}")
    return ScenarioData(name=left_out, full_tree=dataset.tree, known_tree=known.tree,
                        train=train_ds, val=val_ds, test=test_ds, novel=novel)


def build_cells(spec: ScenarioSpec) -> List[GridCell]:
    """One training run per (variant, beta, seed, lr); flat cells ignore beta."""
    cells = []
    for variant in spec.variants:
        betas = [None] if variant == "flat" else list(spec.betas)
        for beta in betas:
            for seed in spec.seeds:
                for lr in spec.learning_rates:
                    cells.append(GridCell(spec.left_out, variant, beta, int(seed), float(lr)))
    return cells


def train_seed(master_seed: int, scenario: str, seed: int, learning_rate: float) -> int:
    # flat and hier cells of one replication share initialization and batch order
    return derive_seed(master_seed, "train", scenario, seed, format_key(learning_rate))


def train_detector(data: ScenarioData, variant: str, beta: Optional[float], seed: int,
                   learning_rate: float, training: TrainingSection, master_seed: int = 0):
    cell_seed = train_seed(master_seed, data.name, seed, learning_rate)
    arch = ArchitectureSpec(input_dim=data.train.feature_dim, output_dim=data.known_tree.num_classes,
                            hidden=tuple(training.hidden))
    config = TrainConfig(
        learning_rate=learning_rate,
        epochs=training.epochs,
        batch_size=training.batch_size,
        seed=cell_seed,
        beta=beta if variant == "hier" else None,
        weight_decay=training.weight_decay,
        momentum=training.momentum,
    )
    return train(init_model(arch, seed=cell_seed), data.train, data.val, data.known_tree, config)


def fit_bank(model: ClassifierModel, train_ds: LabeledDataset, label_mode: str = "true") -> GaussianBank:
    penultimate, _, _ = forward_batch(model, train_ds.features)
    if label_mode == "predicted":
        labels = predict(model, train_ds.features)
    else:
        labels = train_ds.labels
    return dmd_fit(penultimate, labels, model.num_classes, label_mode=label_mode,
                   skip_empty=label_mode == "predicted")


def _write_rows(path: str, columns: Sequence[str], rows: Sequence[Sequence]) -> None:
    os.makedirs(os.path.dirname(path), exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        writer.writerows(rows)


def run_cell(data: ScenarioData, cell: GridCell, spec: ScenarioSpec, output_dir: str,
             master_seed: int = 0) -> List[ExperimentResult]:
    """Train one grid cell, score every detector, persist dumps and diagnostics."""
    start = time.perf_counter()
    hier = cell.variant == "hier"
    model, _ = train_detector(data, cell.variant, cell.beta, cell.seed, cell.learning_rate,
                              spec.training, master_seed)
    K = data.known_tree.num_classes
    soft = soft_label_matrix(data.known_tree, cell.beta) if hier else None
    bank = fit_bank(model, data.train, spec.dmd_label_mode) if "dmd" in spec.detectors else None
    names = data.known_tree.leaf_names

    records, summaries = [], []
    for method in spec.detectors:
        kwargs = dict(soft=soft, bank=bank, temperature=spec.temperature, epsilon=spec.epsilon, leaf_names=names)
        val = score_dataset(model, data.val, method, cell.variant, split="val", **kwargs)
        known = score_dataset(model, data.test, method, cell.variant, split="test", **kwargs)
        novel = score_dataset(model, data.novel, method, cell.variant, is_novel=True, split="test", **kwargs)
        calibration = calibrate_threshold([r.score for r in val], spec.alpha)
        auc = auroc([r.score for r in known], [r.score for r in novel])
        logger.info(f"   {cell.name} {method}: AUROC={auc:.4f}, c={calibration.threshold:.5g}")
        records.extend(val + known + novel)
        summaries.append((method, auc, calibration.threshold))

    dump_path = os.path.join(output_dir, "scores", cell.scenario, f"{cell.name}.csv")
    os.makedirs(os.path.dirname(dump_path), exist_ok=True)
    write_score_dump(records, dump_path)

    tag = [cell.variant, format_key(cell.beta), cell.seed, format_key(cell.learning_rate)]
    curve = rank_distance_curve(model, data.test, data.novel, data.known_tree)
    _write_rows(os.path.join(output_dir, "curves", cell.scenario, f"{cell.name}.csv"), CURVE_COLUMNS,
                [tag + [pop, rank, repr(mean), repr(half)] for pop, rank, mean, half in curve.rows()])

    if "odin" in spec.detectors:
        weights = soft if hier else one_hot_matrix(K)
        summary = u1u2_summary(model, data.test.features, data.novel.features, spec.temperature, weights)
        _write_rows(os.path.join(output_dir, "diagnostics", cell.scenario, f"{cell.name}_u1u2.csv"), U1U2_COLUMNS,
                    [tag + [pop, s["n"], repr(s["u1_mean"]), repr(s["u1_halfwidth"]),
                            repr(s["u2_mean"]), repr(s["u2_halfwidth"])] for pop, s in summary.items()])

    wall_ms = int(round((time.perf_counter() - start) * 1000))
    return [
        ExperimentResult(scenario=cell.scenario, method=method, variant=cell.variant, beta=cell.beta,
                         seed=cell.seed, learning_rate=cell.learning_rate, auroc=auc, threshold=threshold,
                         wall_ms=wall_ms, score_dump=dump_path)
        for method, auc, threshold in summaries
    ]


def run_scenario(spec: ScenarioSpec, dataset: LabeledDataset, output_dir: str,
                 master_seed: int = 0, workers: int = 1) -> List[ExperimentResult]:
    """
    One leave-one-class-out scenario over the whole training grid.
    Cells already present in the results file are skipped.
    """
    spec.validate(dataset.tree)
    total_start = time.time()
    logger.info("=" * 60)
    logger.info(f"🚀 SCENARIO: leave out {spec.left_out}")
    logger.info(f"📊 Detectors: {', '.join(spec.detectors)} | Variants: {', '.join(spec.variants)}")
    logger.info("=" * 60)

    data = prepare_scenario(dataset, spec.left_out, spec.split, master_seed)
    store = ResultsStore(output_dir)
    planned = build_cells(spec)
    done = store.completed_cells()
    pending = [c for c in planned if c.key not in done]
    if len(pending) < len(planned):
        logger.info(f"⏭️  Skipping {len(planned) - len(pending)} completed cells")

    run_cells_parallel(
        pending,
        lambda cell: run_cell(data, cell, spec, output_dir, master_seed),
        workers=workers,
        on_success=lambda cell, rows: (store.append(rows), store.clear_failure(cell.scenario, cell.name)),
        on_failure=lambda cell, error: store.record_failure(cell.scenario, cell.name, error),
        label=lambda cell: cell.name,
    )

    wanted = {c.key for c in planned}
    results = [r for r in store.load() if r.cell_key in wanted]
    logger.info(f"🎯 Scenario {spec.left_out} complete in {time.time() - total_start:.0f}s: {len(results)} result rows")
    return results


def sweep_beta(spec: ScenarioSpec, grid: Sequence[float], dataset: LabeledDataset, output_dir: str,
               master_seed: int = 0, workers: int = 1) -> List[ExperimentResult]:
    """Run the scenario once per beta in ``grid`` and write per-beta AUROC distributions."""
    if "hier" not in spec.variants:
        raise ValueError("a beta sweep needs the hier variant")
    if not grid:
        raise ValueError("beta grid must not be empty")
    results = run_scenario(replace(spec, betas=tuple(float(b) for b in grid)), dataset, output_dir,
                           master_seed, workers)
    _write_rows(os.path.join(output_dir, f"sensitivity_{spec.left_out}.csv"), SENSITIVITY_COLUMNS,
                sensitivity_rows(results))
    return results


def run_experiment(cfg: ExperimentConfig, output_dir: Optional[str] = None,
                   sweep: bool = False) -> List[ExperimentResult]:
    """Every configured scenario, either on ``betas`` or as a sweep over ``sweep_betas``."""
    output_dir = output_dir or cfg.output_dir
    tree = load_taxonomy(cfg)
    dataset = load_dataset(cfg, tree)
    for name in cfg.scenarios:
        tree.leaf_of(name)

    results: List[ExperimentResult] = []
    for name in cfg.scenarios:
        spec = scenario_from_config(cfg, name)
        if sweep:
            results.extend(sweep_beta(spec, cfg.sweep_betas, dataset, output_dir, cfg.master_seed, cfg.workers))
        else:
            results.extend(run_scenario(spec, dataset, output_dir, cfg.master_seed, cfg.workers))
    return results


@dataclass
class DetectorBundle:
    """A trained classifier with everything needed to score new samples."""
    model: ClassifierModel
    tree: TaxonomyTree
    variant: str
    beta: Optional[float] = None
    bank: Optional[GaussianBank] = None
    thresholds: Dict[str, float] = field(default_factory=dict)
    metadata: Dict[str, object] = field(default_factory=dict)

    @property
    def soft(self) -> Optional[SoftLabelMatrix]:
        if self.variant != "hier":
            return None
        return soft_label_matrix(self.tree, self.beta)


def save_detector(bundle: DetectorBundle, path: str) -> None:
    metadata = dict(bundle.metadata)
    metadata.update({
        "variant": bundle.variant,
        "beta": bundle.beta,
        "taxonomy": serialize_taxonomy(bundle.tree),
        "thresholds": dict(bundle.thresholds),
    })
    extras = bundle.bank.to_arrays() if bundle.bank is not None else None
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    save_checkpoint(bundle.model, path, metadata=metadata, extras=extras)


def load_detector(path: str) -> DetectorBundle:
    if not os.path.exists(path):
        raise FileNotFoundError(f"checkpoint not found: {path}")
    model, metadata, extras = load_checkpoint(path)
    if "taxonomy" not in metadata or "variant" not in metadata:
        raise ValueError(f"{path} is not a detector checkpoint (no taxonomy or variant metadata)")
    tree = parse_taxonomy(metadata.pop("taxonomy"))
    if tree.num_classes != model.num_classes:
        raise ValueError(f"checkpoint taxonomy has {tree.num_classes} leaves, model has {model.num_classes} outputs")
    bank = GaussianBank.from_arrays(extras) if "bank_means" in extras else None
    return DetectorBundle(
        model=model,
        tree=tree,
        variant=metadata.pop("variant"),
        beta=metadata.pop("beta", None),
        bank=bank,
        thresholds={k: float(v) for k, v in metadata.pop("thresholds", {}).items()},
        metadata=metadata,
    )
