import os
import logging
from contextlib import asynccontextmanager
from datetime import datetime
from functools import lru_cache
from typing import List, Optional

import numpy as np
from fastapi import Depends, FastAPI, HTTPException, Request
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse
from pydantic import BaseModel

from config import Config, KNOWN_DETECTORS, setup_logging

setup_logging()
logger = logging.getLogger(__name__)

try:
    Config.validate()
    CONFIG_LOADED = True
    logger.info("✅ Environment configuration loaded")
except Exception as e:
    logger.error(f"❌ Configuration validation failed: {e}")
    CONFIG_LOADED = False
    raise

from evaluation import box_stats
from main import DetectorBundle, load_detector
from ood_scores import compute_scores
from report import GROUPS, comparison_groups
from results_store import read_results

ENVIRONMENT = Config.ENVIRONMENT
VERSION = "1.0.0"


@asynccontextmanager
async def lifespan(app: FastAPI):
    logger.info(f"🚀 Novel Fault Detection API starting ({ENVIRONMENT})")
    if Config.MODEL_PATH:
        logger.info(f"   Detector checkpoint: {Config.MODEL_PATH}")
    else:
        logger.warning("⚠️ MODEL_PATH not set, /api/score will answer 503")
    yield
    logger.info("👋 Novel Fault Detection API shutting down")


app = FastAPI(
    title="Novel Fault Detection API",
    description="Scores process samples against a hierarchy-aware detector and raises novel-fault alarms",
    version=VERSION,
    lifespan=lifespan,
    docs_url="/docs" if ENVIRONMENT == "development" else None,
    redoc_url="/redoc" if ENVIRONMENT == "development" else None,
    openapi_url="/openapi.json" if ENVIRONMENT == "development" else None,
)

app.add_middleware(
    CORSMiddleware,
    allow_origins=["*"] if ENVIRONMENT == "development" else [],
    allow_methods=["GET", "POST", "OPTIONS"],
    allow_headers=["Content-Type"],
    max_age=3600,
)


class ScoreRequest(BaseModel):
    features: List[float]
    method: Optional[str] = None
    threshold: Optional[float] = None


@lru_cache(maxsize=4)
def _load_cached(path: str) -> DetectorBundle:
    logger.info(f"📦 Loading detector checkpoint {path}")
    return load_detector(path)


def get_detector() -> DetectorBundle:
    """Detector configured through MODEL_PATH, loaded once per path."""
    if not Config.MODEL_PATH:
        raise HTTPException(status_code=503, detail="No detector configured (MODEL_PATH is not set)")
    try:
        return _load_cached(Config.MODEL_PATH)
    except (OSError, ValueError) as e:
        logger.error(f"❌ Could not load detector: {e}")
        raise HTTPException(status_code=503, detail="Detector checkpoint could not be loaded")


def _alarm_threshold(bundle: DetectorBundle, method: str, requested: Optional[float]) -> Optional[float]:
    if requested is not None:
        return requested
    if Config.ALARM_THRESHOLD:
        return float(Config.ALARM_THRESHOLD)
    return bundle.thresholds.get(method)


@app.get("/")
async def index():
    """Root endpoint with API information"""
    return JSONResponse(
        content={
            "message": "Novel Fault Detection API",
            "version": VERSION,
            "status": "running",
            "environment": ENVIRONMENT,
            "detector": {"method": Config.SCORE_METHOD, "variant": Config.SCORE_VARIANT},
            "endpoints": {
                "POST /api/score": "Score one feature vector and report the alarm decision",
                "GET /api/results": "AUROC summary of an experiment results file",
                "GET /health": "Health check",
            },
        }
    )


@app.get("/health")
async def health_check():
    """Component status; 503 when the configured detector cannot be loaded."""
    health_status = {
        "status": "healthy",
        "timestamp": datetime.now().isoformat(),
        "service": "novel-fault-detection",
        "version": VERSION,
        "environment": ENVIRONMENT,
        "components": {
            "configuration": {"status": "healthy" if CONFIG_LOADED else "unhealthy", "loaded": CONFIG_LOADED},
        },
    }

    if not Config.MODEL_PATH:
        health_status["components"]["detector"] = {"status": "not_configured"}
        health_status["status"] = "degraded"
    else:
        try:
            bundle = _load_cached(Config.MODEL_PATH)
            health_status["components"]["detector"] = {
                "status": "healthy",
                "classes": bundle.tree.num_classes,
                "variant": bundle.variant,
                "thresholds": sorted(bundle.thresholds),
            }
        except Exception as e:
            health_status["components"]["detector"] = {"status": "unhealthy", "error": str(e)[:200]}
            health_status["status"] = "unhealthy"

    if health_status["status"] == "unhealthy":
        return JSONResponse(status_code=503, content=health_status)
    return health_status


@app.post("/api/score")
async def score_sample(request: ScoreRequest, bundle: DetectorBundle = Depends(get_detector)):
    """Score one sample; an alarm is raised when the score exceeds the calibrated threshold."""
    method = request.method or Config.SCORE_METHOD
    if method not in KNOWN_DETECTORS:
        raise HTTPException(status_code=400, detail=f"Unknown method '{method}'")
    if not request.features:
        raise HTTPException(status_code=400, detail="features must not be empty")
    if len(request.features) != bundle.model.spec.input_dim:
        raise HTTPException(
            status_code=400,
            detail=f"Expected {bundle.model.spec.input_dim} features, got {len(request.features)}",
        )
    if method == "dmd" and bundle.bank is None:
        raise HTTPException(status_code=400, detail="Detector checkpoint carries no Gaussian bank")

    X = np.asarray(request.features, dtype=np.float64)[None, :]
    try:
        scores, predicted = compute_scores(bundle.model, X, method, bundle.variant, soft=bundle.soft,
                                           bank=bundle.bank, temperature=Config.TEMPERATURE,
                                           epsilon=Config.EPSILON)
    except ValueError as e:
        raise HTTPException(status_code=400, detail=str(e))

    score = float(scores[0])
    threshold = _alarm_threshold(bundle, method, request.threshold)
    alarm = None if threshold is None else bool(score > threshold)
    if alarm:
        logger.warning(f"🚨 Novel fault alarm: {bundle.variant}/{method} score {score:.5g} > {threshold:.5g}")
    return {
        "success": True,
        "method": method,
        "variant": bundle.variant,
        "score": score,
        "predicted_leaf": bundle.tree.leaf_names[int(predicted[0])],
        "threshold": threshold,
        "alarm": alarm,
    }


def _results_file(path: Optional[str]) -> str:
    """Resolve ``path`` inside OUTPUT_DIR; anything outside is reported as missing."""
    root = os.path.realpath(Config.OUTPUT_DIR)
    candidate = os.path.realpath(os.path.join(root, path or "results.csv"))
    if os.path.commonpath([root, candidate]) != root:
        logger.warning(f"⚠️ Refused results path outside {root}: {path}")
        raise HTTPException(status_code=404, detail="Results file not found")
    return candidate


@app.get("/api/results")
async def results_summary(path: Optional[str] = None):
    """Per-scenario AUROC medians of a results CSV under OUTPUT_DIR (default: results.csv)."""
    results_path = _results_file(path)
    try:
        results = read_results(results_path)
    except FileNotFoundError:
        raise HTTPException(status_code=404, detail="Results file not found")
    except ValueError as e:
        raise HTTPException(status_code=400, detail=str(e))

    report_betas = Config.report_betas()
    scenarios = {}
    for scenario in sorted({r.scenario for r in results}):
        groups = comparison_groups([r for r in results if r.scenario == scenario], report_betas)
        summary = {}
        for g in GROUPS:
            stats = box_stats(groups[g])
            summary[g] = {"n": stats["n"], "median": stats["median"] if stats["n"] else None}
        scenarios[scenario] = summary
    return {"success": True, "path": results_path, "rows": len(results), "scenarios": scenarios}


# Error handlers
@app.exception_handler(HTTPException)
async def http_exception_handler(request: Request, exc: HTTPException):
    """Handle HTTP exceptions with structured logging"""
    logger.warning(f"⚠️ HTTP {exc.status_code} at {request.url.path}: {exc.detail}")
    return JSONResponse(
        status_code=exc.status_code,
        content={
            "success": False,
            "error": exc.detail,
            "status_code": exc.status_code,
            "timestamp": datetime.now().isoformat(),
            "path": request.url.path,
        },
    )


@app.exception_handler(Exception)
async def general_exception_handler(request: Request, exc: Exception):
    """Handle all other exceptions - log internally, return generic error"""
    logger.error(f"❌ Unhandled exception at {request.url.path}: {exc}", exc_info=True)
    return JSONResponse(
        status_code=500,
        content={
            "success": False,
            "error": "Internal server error",
            "status_code": 500,
            "timestamp": datetime.now().isoformat(),
        },
    )


# For local development only (production starts through start.sh)
if __name__ == "__main__":
    import uvicorn

    logger.info(f"🏃 Starting development server on {Config.HOST}:{Config.PORT}")
    uvicorn.run(
        "app:app",
        host=Config.HOST,
        port=Config.PORT,
        reload=ENVIRONMENT == "development",
        log_level="info",
    )
