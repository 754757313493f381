import os
import logging
from dataclasses import dataclass, field, fields, asdict
from typing import Dict, List, Optional

from dotenv import load_dotenv

from utils import parse_json_document

# Load environment variables from .env file for local development
load_dotenv()

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - [%(filename)s:%(lineno)d] - %(message)s"

KNOWN_DETECTORS = ("msp", "odin", "dmd")
KNOWN_VARIANTS = ("flat", "hier")
DEFAULT_SCENARIOS = ("A12", "A31", "A61", "A40")
DEFAULT_BETA_GRID = (0.1, 1.0, 10.0, 100.0)
RECOMMENDED_BETA = 10.0


class ConfigError(ValueError):
    pass


def setup_logging(level: Optional[str] = None) -> None:
    """Configure root logging once for the CLI and the HTTP service."""
    level_name = (level or Config.LOG_LEVEL or "info").upper()
    logging.basicConfig(
        level=getattr(logging, level_name, logging.INFO),
        format=LOG_FORMAT,
        handlers=[logging.StreamHandler()],
    )
    # Suppress noisy logs
    logging.getLogger("uvicorn.access").setLevel(logging.WARNING)
    logging.getLogger("httpx").setLevel(logging.WARNING)


class Config:
    """
    Environment configuration.
    Experiment semantics live in the JSON config file; the environment only
    carries runtime knobs and the master-seed override.
    """
    # --- Runtime ---
    ENVIRONMENT = os.getenv("ENVIRONMENT", "development")
    LOG_LEVEL = os.getenv("LOG_LEVEL", "info")
    WORKERS = int(os.getenv("WORKERS", "1"))
    OUTPUT_DIR = os.getenv("OUTPUT_DIR", "results")

    # Only environment override of experiment semantics
    MASTER_SEED = os.getenv("NFD_MASTER_SEED")

    # --- Monitoring service ---
    MODEL_PATH = os.getenv("MODEL_PATH", "")
    SCORE_METHOD = os.getenv("SCORE_METHOD", "msp")
    SCORE_VARIANT = os.getenv("SCORE_VARIANT", "hier")
    ALARM_THRESHOLD = os.getenv("ALARM_THRESHOLD")
    TEMPERATURE = float(os.getenv("TEMPERATURE", "1000"))
    EPSILON = float(os.getenv("EPSILON", "0.0012"))
    HOST = os.getenv("HOST", "0.0.0.0")
    PORT = int(os.getenv("PORT", "8000"))
    REPORT_BETAS = os.getenv("REPORT_BETAS", "10,100")

    @classmethod
    def master_seed_override(cls) -> Optional[int]:
        value = os.getenv("NFD_MASTER_SEED", cls.MASTER_SEED or "")
        if not value:
            return None
        try:
            return int(value)
        except ValueError:
            raise ConfigError(f"NFD_MASTER_SEED must be an integer, got {value!r}")

    @classmethod
    def report_betas(cls) -> List[float]:
        """Hier betas pooled into the service's results summary."""
        try:
            betas = [float(b) for b in cls.REPORT_BETAS.split(",") if b.strip()]
        except ValueError:
            raise ConfigError(f"REPORT_BETAS must be comma-separated numbers, got {cls.REPORT_BETAS!r}")
        if not betas or any(not (b > 0) for b in betas):
            raise ConfigError("REPORT_BETAS must list at least one beta > 0")
        return betas

    @classmethod
    def validate(cls, require_model: bool = False):
        """
        Validates environment settings.
        Call this during service startup to fail fast if config is missing.
        """
        problems = []

        if cls.WORKERS < 1:
            problems.append("WORKERS must be >= 1")
        if cls.SCORE_METHOD not in KNOWN_DETECTORS:
            problems.append(f"SCORE_METHOD must be one of {KNOWN_DETECTORS}")
        if cls.SCORE_VARIANT not in KNOWN_VARIANTS:
            problems.append(f"SCORE_VARIANT must be one of {KNOWN_VARIANTS}")
        if cls.TEMPERATURE <= 0:
            problems.append("TEMPERATURE must be > 0")
        if cls.EPSILON < 0:
            problems.append("EPSILON must be >= 0")
        if require_model and not cls.MODEL_PATH:
            problems.append("MODEL_PATH is required")
        cls.master_seed_override()
        cls.report_betas()

        if problems:
            error_msg = f"❌ Invalid environment configuration: {'; '.join(problems)}"
            logger.error(error_msg)
            raise ConfigError(error_msg)

        logger.info("✅ Configuration validated successfully")
        logger.info(f"   Environment: {cls.ENVIRONMENT}")
        logger.info(f"   Workers: {cls.WORKERS}")
        logger.info(f"   Detector: {cls.SCORE_VARIANT}/{cls.SCORE_METHOD}")
        return True


@dataclass
class GeneratorSection:
    feature_dim: int = 16
    parent_spread: float = 4.0
    child_spread: float = 1.0
    noise: float = 0.5
    seed: int = 0
    counts: Optional[Dict[str, int]] = None
    default_count: int = 50


@dataclass
class TrainingSection:
    hidden: List[int] = field(default_factory=lambda: [64, 32])
    epochs: int = 300
    batch_size: int = 32
    momentum: float = 0.9
    weight_decay: float = 1e-4


@dataclass
class ExperimentConfig:
    """Structured experiment config (JSON file, same family as the taxonomy document)."""
    taxonomy_path: Optional[str] = None
    data_path: Optional[str] = None
    generator: GeneratorSection = field(default_factory=GeneratorSection)
    scenarios: List[str] = field(default_factory=lambda: list(DEFAULT_SCENARIOS))
    detectors: List[str] = field(default_factory=lambda: list(KNOWN_DETECTORS))
    variants: List[str] = field(default_factory=lambda: list(KNOWN_VARIANTS))
    betas: List[float] = field(default_factory=lambda: [RECOMMENDED_BETA])
    sweep_betas: List[float] = field(default_factory=lambda: list(DEFAULT_BETA_GRID))
    seeds: List[int] = field(default_factory=lambda: list(range(10)))
    learning_rates: List[float] = field(default_factory=lambda: [0.003, 0.01, 0.03])
    training: TrainingSection = field(default_factory=TrainingSection)
    split: List[float] = field(default_factory=lambda: [0.6, 0.2, 0.2])
    temperature: float = 1000.0
    epsilon: float = 0.0012
    alpha: float = 0.05
    dmd_label_mode: str = "true"
    report_betas: List[float] = field(default_factory=lambda: [10.0, 100.0])
    output_dir: str = "results"
    workers: int = 1
    master_seed: int = 0

    def validate(self) -> "ExperimentConfig":
        if not self.scenarios:
            raise ConfigError("scenarios must not be empty")
        if not self.detectors or any(d not in KNOWN_DETECTORS for d in self.detectors):
            raise ConfigError(f"detectors must be a nonempty subset of {KNOWN_DETECTORS}")
        if not self.variants or any(v not in KNOWN_VARIANTS for v in self.variants):
            raise ConfigError(f"variants must be a nonempty subset of {KNOWN_VARIANTS}")
        if "hier" in self.variants and not self.betas:
            raise ConfigError("betas must not be empty when the hier variant is requested")
        if any(not (b > 0) for b in self.betas) or any(not (b > 0) for b in self.sweep_betas):
            raise ConfigError("every beta must be > 0")
        if not self.sweep_betas:
            raise ConfigError("sweep_betas must not be empty")
        if not self.seeds:
            raise ConfigError("seeds must not be empty")
        if not self.learning_rates or any(lr <= 0 for lr in self.learning_rates):
            raise ConfigError("learning_rates must be a nonempty list of positive values")
        if self.training.epochs < 1:
            raise ConfigError("training.epochs must be >= 1")
        if self.training.batch_size < 1:
            raise ConfigError("training.batch_size must be >= 1")
        if self.temperature <= 0:
            raise ConfigError("temperature must be > 0")
        if self.epsilon < 0:
            raise ConfigError("epsilon must be >= 0")
        if not (0 < self.alpha < 1):
            raise ConfigError("alpha must be in (0, 1)")
        if self.dmd_label_mode not in ("true", "predicted"):
            raise ConfigError("dmd_label_mode must be 'true' or 'predicted'")
        if len(self.split) != 3:
            raise ConfigError("split must have three fractions (train, val, test)")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        return self

    def to_dict(self) -> dict:
        return asdict(self)


def _build_section(cls, raw, section: str):
    if raw is None:
        return cls()
    if not isinstance(raw, dict):
        raise ConfigError(f"section '{section}' must be an object")
    allowed = {f.name for f in fields(cls)}
    unknown = set(raw) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in '{section}': {', '.join(sorted(unknown))}")
    return cls(**raw)


def load_experiment_config(path: str, seed_override: Optional[int] = None) -> ExperimentConfig:
    """Load and validate a JSON experiment config.

    Master seed precedence: ``seed_override`` (the ``--seed`` flag), then the
    ``NFD_MASTER_SEED`` environment variable, then the file.
    """
    if not path or not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    with open(path, "r", encoding="utf-8") as fh:
        raw = parse_json_document(fh.read(), what=f"config {path}")
    if not isinstance(raw, dict):
        raise ConfigError("config root must be an object")

    nested = {
        "generator": GeneratorSection,
        "training": TrainingSection,
    }
    values = {}
    allowed = {f.name for f in fields(ExperimentConfig)}
    unknown = set(raw) - allowed
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
    for key, value in raw.items():
        if key in nested:
            values[key] = _build_section(nested[key], value, key)
        else:
            values[key] = value

    cfg = ExperimentConfig(**values)
    env_seed = Config.master_seed_override()
    if seed_override is not None:
        cfg.master_seed = int(seed_override)
    elif env_seed is not None:
        cfg.master_seed = env_seed
    logger.info(f"Loaded experiment config {path} (master seed {cfg.master_seed})")
    return cfg.validate()
