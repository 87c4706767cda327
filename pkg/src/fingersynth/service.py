"""HTTP service wrapping the toolkit.

Training and other pipeline tasks submit as background jobs (POST /runs,
poll GET /runs/{id}); quick operations (metric evaluation, pair scoring,
corpus synthesis) run synchronously. The service and its clients share a
filesystem: requests reference datasets and output directories by path.
"""

from __future__ import annotations

import threading
import uuid

import numpy as np
from fastapi import FastAPI, HTTPException
from pydantic import BaseModel, Field

from . import __version__, biometric, data, metrics, runner
from .config import parse_config
from .errors import ConfigurationError, FingersynthError


class RunRequest(BaseModel):
    config_text: str = Field(description="run configuration in the INI run-file format")
    seed: int | None = None
    out_dir: str | None = None


class RunInfo(BaseModel):
    run_id: str
    task: str
    status: str  # queued | running | finished | failed
    out_dir: str
    error: str | None = None
    artifacts: list[str] = []


class ReportResponse(BaseModel):
    run_id: str
    report: str


class EvaluateRequest(BaseModel):
    dataset_a: str
    dataset_b: str
    pad_to: int = 32
    extractor: str = "pixel_pca"
    n_components: int = 24
    k: int = 5
    kid_subsets: int = 10
    seed: int = 0


class MetricReportModel(BaseModel):
    fid: float | None
    kid: float | None
    precision: float | None
    recall: float | None
    density: float | None
    coverage: float | None
    k: int | None
    n_a: int | None
    n_b: int | None


class MatchScoreRequest(BaseModel):
    image_a: str
    image_b: str
    max_shift: int = 8
    max_rotation: float = 15.0


class MatchScoreResponse(BaseModel):
    score: float
    matcher_id: str


class SynthDataRequest(BaseModel):
    out_dir: str
    n: int = 64
    size: int = 32
    n_fingers: int | None = None
    seed: int = 0
    frequency: float = 0.11
    noise_level: float = 0.08
    spoof_corruption: bool = False


class SynthDataResponse(BaseModel):
    out_dir: str
    count: int


class _JobTable:
    def __init__(self):
        self._lock = threading.Lock()
        self._jobs: dict[str, RunInfo] = {}

    def put(self, info: RunInfo) -> None:
        with self._lock:
            self._jobs[info.run_id] = info

    def update(self, run_id: str, **fields) -> None:
        with self._lock:
            self._jobs[run_id] = self._jobs[run_id].model_copy(update=fields)

    def get(self, run_id: str) -> RunInfo | None:
        with self._lock:
            return self._jobs.get(run_id)

    def all(self) -> list[RunInfo]:
        with self._lock:
            return sorted(self._jobs.values(), key=lambda j: j.run_id)


def create_app() -> FastAPI:
    app = FastAPI(title="fingersynth", version=__version__)
    jobs = _JobTable()

    @app.get("/health")
    def health():
        return {"status": "ok", "version": __version__}

    @app.post("/runs", response_model=RunInfo)
    def submit_run(req: RunRequest):
        overrides = {}
        if req.seed is not None:
            overrides[("run", "seed")] = str(req.seed)
        if req.out_dir is not None:
            overrides[("run", "out_dir")] = req.out_dir
        try:
            cfg = parse_config(req.config_text, overrides=overrides or None)
        except ConfigurationError as exc:
            raise HTTPException(status_code=400, detail=str(exc))
        run_id = uuid.uuid4().hex[:12]
        info = RunInfo(run_id=run_id, task=cfg.task, status="queued", out_dir=cfg.out_dir)
        jobs.put(info)

        def worker():
            jobs.update(run_id, status="running")
            try:
                result = runner.run(cfg)
                jobs.update(run_id, status="finished", artifacts=result.artifacts)
            except Exception as exc:
                jobs.update(run_id, status="failed", error=str(exc))

        threading.Thread(target=worker, daemon=True).start()
        return jobs.get(run_id)

    @app.get("/runs", response_model=list[RunInfo])
    def list_runs():
        return jobs.all()

    @app.get("/runs/{run_id}", response_model=RunInfo)
    def get_run(run_id: str):
        info = jobs.get(run_id)
        if info is None:
            raise HTTPException(status_code=404, detail=f"unknown run {run_id}")
        return info

    @app.get("/runs/{run_id}/report", response_model=ReportResponse)
    def get_report(run_id: str):
        info = jobs.get(run_id)
        if info is None:
            raise HTTPException(status_code=404, detail=f"unknown run {run_id}")
        return ReportResponse(run_id=run_id, report=runner.report_bundle(info.out_dir))

    @app.post("/evaluate", response_model=MetricReportModel)
    def evaluate(req: EvaluateRequest):
        try:
            ds_a = data.load_image_dataset(req.dataset_a, pad_to=req.pad_to)
            ds_b = data.load_image_dataset(req.dataset_b, pad_to=req.pad_to)
            if len(ds_a) < 2 or len(ds_b) < 2:
                raise ConfigurationError("both datasets need at least 2 images")
            if req.extractor == "pixel_pca":
                comps = min(req.n_components, len(ds_a) - 1)
                extractor = metrics.PixelPCAExtractor(comps).fit(ds_a.images)
            elif req.extractor == "small_cnn":
                extractor = metrics.SmallCnnExtractor().fit(ds_a.images, seed=req.seed)
            else:
                raise ConfigurationError(f"unknown extractor {req.extractor!r}")
            fs_a = metrics.extract_features(extractor, ds_a.images, source_id=req.dataset_a)
            fs_b = metrics.extract_features(extractor, ds_b.images, source_id=req.dataset_b)
            k = min(req.k, min(fs_a.n, fs_b.n) - 1)
            report = metrics.evaluate_feature_sets(
                fs_a, fs_b, k=k, kid_subset_size=min(100, fs_a.n, fs_b.n),
                kid_subsets=req.kid_subsets, seed=req.seed,
            )
        except (ConfigurationError, FileNotFoundError) as exc:
            raise HTTPException(status_code=400, detail=str(exc))
        except FingersynthError as exc:
            raise HTTPException(status_code=500, detail=str(exc))
        return MetricReportModel(
            fid=report.fid, kid=report.kid, precision=report.precision, recall=report.recall,
            density=report.density, coverage=report.coverage, k=report.k, n_a=report.n_a, n_b=report.n_b,
        )

    @app.post("/match-score", response_model=MatchScoreResponse)
    def match_score(req: MatchScoreRequest):
        try:
            img_a = data.load_png(req.image_a)
            img_b = data.load_png(req.image_b)
            angles = tuple(float(a) for a in np.arange(-req.max_rotation, req.max_rotation + 1e-9, 5.0))
            matcher = biometric.NccMatcher(max_shift=req.max_shift, angles=angles)
            score = matcher.score(img_a, img_b)
        except FileNotFoundError as exc:
            raise HTTPException(status_code=400, detail=str(exc))
        except ValueError as exc:
            raise HTTPException(status_code=400, detail=str(exc))
        return MatchScoreResponse(score=score, matcher_id=matcher.matcher_id)

    @app.post("/synth-data", response_model=SynthDataResponse)
    def synth_data(req: SynthDataRequest):
        try:
            params = data.RidgeParams(frequency=req.frequency, noise_level=req.noise_level)
            ds = data.synth_ridge_dataset(req.n, req.size, params, seed=req.seed, n_fingers=req.n_fingers)
            if req.spoof_corruption:
                ds.images = data.apply_spoof_corruption(ds.images, seed=req.seed + 77)
            data.save_image_dataset(ds, req.out_dir)
        except ConfigurationError as exc:
            raise HTTPException(status_code=400, detail=str(exc))
        return SynthDataResponse(out_dir=req.out_dir, count=len(ds))

    return app


app = create_app()
