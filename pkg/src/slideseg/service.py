"""HTTP workbench service: slide upload and tiles, segmentation jobs,
annotation documents with optimistic concurrency, metrics, and training
export.

State lives in a flat data directory - everything inspectable:

    {data_dir}/slides/{id}/pyramid/...          tile pyramid
    {data_dir}/slides/{id}/name.txt             upload name
    {data_dir}/slides/{id}/annotations/current.json and rev-{n}.json
    {data_dir}/timing.csv                       one row per completed job

Jobs are in-memory, FIFO, at most one non-terminal job per slide (submitting
a second returns 409) and at most `max_jobs` running globally. Annotation
writes are serialized per slide; a PUT carrying a stale If-Match revision
gets 409 plus the current document.
"""

from __future__ import annotations

import json
import logging
import os
import threading
import time
import uuid
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

from fastapi import FastAPI, Request, Response
from fastapi.concurrency import run_in_threadpool
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import FileResponse, JSONResponse
from fastapi.staticfiles import StaticFiles

from . import annotations as ann
from .backends import BackendConfig
from .errors import FormatError, SlidesegError, ValidationError
from .metrics import doc_layer_confusion, metrics, micro_average
from .pipeline import TIMING_COLUMNS, append_timing, segment_slide
from .pyramid import SlidePyramid, build_pyramid, decode_image_bytes
from .training import TrainingManifest, export_training_patches

log = logging.getLogger(__name__)

_SERVICE_CACHE_TILES = 256


def _err(status: int, message: str, **extra) -> JSONResponse:
    return JSONResponse({"error": message, **extra}, status_code=status)


class SlideStore:
    def __init__(self, root: Path):
        self.root = root
        self.slides_dir = root / "slides"
        self.slides_dir.mkdir(parents=True, exist_ok=True)
        self._pyramids: dict[str, SlidePyramid] = {}
        self._lock = threading.Lock()

    def create(self, data: bytes, name: str) -> dict:
        image = decode_image_bytes(data)
        slide_id = uuid.uuid4().hex[:12]
        slide_dir = self.slides_dir / slide_id
        build_pyramid(image, slide_dir / "pyramid")
        (slide_dir / "name.txt").write_text(name or slide_id)
        return self.meta(slide_id)

    def ids(self) -> list[str]:
        return sorted(p.name for p in self.slides_dir.iterdir()
                      if (p / "pyramid" / "meta.json").exists())

    def exists(self, slide_id: str) -> bool:
        return (self.slides_dir / slide_id / "pyramid" / "meta.json").exists()

    def pyramid(self, slide_id: str) -> SlidePyramid:
        with self._lock:
            if slide_id not in self._pyramids:
                self._pyramids[slide_id] = SlidePyramid(
                    self.slides_dir / slide_id / "pyramid",
                    cache_tiles=_SERVICE_CACHE_TILES)
            return self._pyramids[slide_id]

    def meta(self, slide_id: str) -> dict:
        p = self.pyramid(slide_id)
        name_file = self.slides_dir / slide_id / "name.txt"
        return {"slide_id": slide_id,
                "name": name_file.read_text() if name_file.exists() else slide_id,
                "width0": p.width0, "height0": p.height0,
                "levels": p.levels, "tile_size": p.tile_size,
                "mpp": p.mpp, "state": "ready"}


class AnnotationStore:
    """Per-slide serialized document persistence with revision history."""

    def __init__(self, slides_dir: Path):
        self.slides_dir = slides_dir
        self._locks: dict[str, threading.RLock] = {}
        self._guard = threading.Lock()

    def lock(self, slide_id: str) -> threading.RLock:
        with self._guard:
            if slide_id not in self._locks:
                self._locks[slide_id] = threading.RLock()
            return self._locks[slide_id]

    def _dir(self, slide_id: str) -> Path:
        return self.slides_dir / slide_id / "annotations"

    def load(self, slide_id: str) -> ann.AnnotationDocument:
        current = self._dir(slide_id) / "current.json"
        if not current.exists():
            return ann.AnnotationDocument(slide_id=slide_id, revision=0)
        return ann.from_json(current.read_bytes())

    def save(self, slide_id: str, doc: ann.AnnotationDocument) -> None:
        doc = ann.AnnotationDocument(slide_id=slide_id, revision=doc.revision,
                                     layers=doc.layers, modified_at=time.time())
        target = self._dir(slide_id)
        target.mkdir(parents=True, exist_ok=True)
        payload = ann.to_json(doc)
        (target / f"rev-{doc.revision}.json").write_bytes(payload)
        tmp = target / "current.json.tmp"
        tmp.write_bytes(payload)
        os.replace(tmp, target / "current.json")

    def replace(self, slide_id: str, base_revision: int,
                new_doc: ann.AnnotationDocument):
        """Optimistic-concurrency write. Returns (True, saved doc) or
        (False, current doc) when base_revision is stale."""
        with self.lock(slide_id):
            current = self.load(slide_id)
            if current.revision != base_revision:
                return False, current
            saved = ann.AnnotationDocument(slide_id=slide_id,
                                           revision=base_revision + 1,
                                           layers=new_doc.layers)
            self.save(slide_id, saved)
            return True, saved

    def merge_predicted(self, slide_id: str,
                        layers: list[ann.AnnotationLayer]) -> ann.AnnotationDocument:
        with self.lock(slide_id):
            merged = ann.merge_predicted(self.load(slide_id), layers)
            self.save(slide_id, merged)
            return merged


@dataclass
class Job:
    job_id: str
    slide_id: str
    params: dict
    state: str = "queued"  # queued|running|done|failed
    done_tiles: int = 0
    total_tiles: int = 0
    started: float | None = None
    finished: float | None = None
    error: str | None = None
    timing: dict | None = None
    warnings: list[str] = field(default_factory=list)

    def to_jsonable(self) -> dict:
        return {"job_id": self.job_id, "slide_id": self.slide_id,
                "state": self.state,
                "progress": {"done": self.done_tiles,
                             "total": self.total_tiles},
                "params": self.params, "started": self.started,
                "finished": self.finished, "error": self.error,
                "timing": self.timing, "warnings": self.warnings}


class JobManager:
    """FIFO queue, one non-terminal job per slide, bounded global runners."""

    def __init__(self, runner, max_jobs: int):
        self.runner = runner
        self.max_jobs = max_jobs
        self.jobs: dict[str, Job] = {}
        self._order: list[str] = []
        self._queue: deque[str] = deque()
        self._busy_slides: set[str] = set()
        self._running = 0
        self._lock = threading.Lock()

    def submit(self, slide_id: str, params: dict) -> Job | None:
        with self._lock:
            if slide_id in self._busy_slides:
                return None
            job = Job(job_id=uuid.uuid4().hex[:12], slide_id=slide_id,
                      params=params)
            self.jobs[job.job_id] = job
            self._order.append(job.job_id)
            self._queue.append(job.job_id)
            self._busy_slides.add(slide_id)
            self._maybe_start()
            return job

    def get(self, job_id: str) -> Job | None:
        return self.jobs.get(job_id)

    def list(self) -> list[Job]:
        return [self.jobs[j] for j in self._order]

    def _maybe_start(self) -> None:
        # caller holds the lock
        while self._queue and self._running < self.max_jobs:
            job = self.jobs[self._queue.popleft()]
            self._running += 1
            thread = threading.Thread(target=self._run, args=(job,),
                                      name=f"job-{job.job_id}", daemon=True)
            thread.start()

    def _run(self, job: Job) -> None:
        job.state = "running"
        job.started = time.time()
        try:
            self.runner(job)
            job.state = "done"
        except SlidesegError as exc:
            job.error = str(exc)
            job.state = "failed"
        except Exception as exc:  # noqa: BLE001 - job boundary
            log.exception("job %s crashed", job.job_id)
            job.error = f"internal error: {exc}"
            job.state = "failed"
        finally:
            job.finished = time.time()
            if job.timing is None:
                job.timing = {"started": job.started, "finished": job.finished,
                              "slide_pixels": 0, "analyzed_pixels": 0,
                              "wall_seconds": job.finished - job.started,
                              "tile_count": 0}
            with self._lock:
                self._busy_slides.discard(job.slide_id)
                self._running -= 1
                self._maybe_start()


def _job_params(body: dict) -> dict:
    params = body.get("params") or {}
    if not isinstance(params, dict):
        raise ValidationError("'params' must be an object")
    out = {
        "tile_size": int(params.get("tile_size", 512)),
        "overlap": int(params.get("overlap", 64)),
        "min_area_px": int(params.get("min_area_px", 400)),
        "epsilon_px": float(params.get("epsilon_px", 2.0)),
        "full_grid": bool(params.get("full_grid", False)),
    }
    layer_names = params.get("layer_names")
    if layer_names is not None:
        if (not isinstance(layer_names, list)
                or not all(isinstance(n, str) for n in layer_names)):
            raise ValidationError("'layer_names' must be a list of strings")
    out["layer_names"] = layer_names
    if out["min_area_px"] < 0 or out["epsilon_px"] < 0:
        raise ValidationError("min_area_px and epsilon_px must be >= 0")
    backend = body.get("backend")
    if backend is not None and not isinstance(backend, dict):
        raise ValidationError("'backend' must be an object")
    out["backend"] = backend
    return out


def create_app(data_dir: str | Path, max_jobs: int = 2,
               workers: int | None = None,
               static_dir: str | Path | None = None) -> FastAPI:
    data_dir = Path(data_dir)
    data_dir.mkdir(parents=True, exist_ok=True)
    slides = SlideStore(data_dir)
    annotations = AnnotationStore(slides.slides_dir)
    timing_csv = data_dir / "timing.csv"
    n_workers = workers or os.cpu_count() or 2

    def run_job(job: Job) -> None:
        pyramid = slides.pyramid(job.slide_id)
        backend_cfg = job.params.get("backend")
        cfg = BackendConfig.from_dict(backend_cfg) if backend_cfg \
            else BackendConfig()

        def progress(done: int, total: int) -> None:
            job.done_tiles, job.total_tiles = done, total

        result = segment_slide(
            pyramid, cfg,
            tile_size=job.params["tile_size"],
            overlap=job.params["overlap"],
            min_area_px=job.params["min_area_px"],
            epsilon_px=job.params["epsilon_px"],
            full_grid=job.params["full_grid"],
            layer_names=job.params["layer_names"],
            workers=n_workers, progress=progress)
        job.total_tiles = result.tile_count
        job.done_tiles = result.tile_count
        job.warnings = result.warnings
        annotations.merge_predicted(job.slide_id, result.doc.layers)
        append_timing(timing_csv, result.timing)
        job.timing = {"started": job.started, "finished": time.time(),
                      "slide_pixels": result.timing.slide_pixels,
                      "analyzed_pixels": result.timing.analyzed_pixels,
                      "wall_seconds": result.timing.wall_seconds,
                      "tile_count": result.timing.tile_count}

    jobs = JobManager(run_job, max_jobs=max_jobs)
    app = FastAPI(title="slideseg workbench")
    app.add_middleware(CORSMiddleware, allow_origins=["*"],
                       allow_methods=["*"], allow_headers=["*"],
                       expose_headers=["ETag"])

    @app.post("/api/slides")
    async def upload_slide(request: Request, name: str = ""):
        data = await request.body()
        if not data:
            return _err(415, "empty upload")
        try:
            meta = await run_in_threadpool(slides.create, data, name)
        except FormatError as exc:
            return _err(415, str(exc))
        return JSONResponse(meta, status_code=201)

    @app.get("/api/slides")
    def list_slides():
        return {"slides": [slides.meta(s) for s in slides.ids()]}

    @app.get("/api/slides/{slide_id}")
    def slide_meta(slide_id: str):
        if not slides.exists(slide_id):
            return _err(404, "unknown slide")
        return slides.meta(slide_id)

    @app.get("/api/slides/{slide_id}/tiles/{level}/{xy}")
    def get_tile(slide_id: str, level: int, xy: str):
        if not slides.exists(slide_id):
            return _err(404, "unknown slide")
        try:
            x_str, y_str = xy.split("_", 1)
            x, y = int(x_str), int(y_str)
        except ValueError:
            return _err(404, "tile address must be {x}_{y}")
        pyramid = slides.pyramid(slide_id)
        if not 0 <= level < pyramid.levels:
            return _err(404, "level out of range")
        nx, ny = pyramid.tile_counts(level)
        if not (0 <= x < nx and 0 <= y < ny):
            return _err(404, "tile out of range")
        return FileResponse(pyramid.tile_path(level, x, y),
                            media_type="image/png",
                            headers={"Cache-Control":
                                     "public, max-age=31536000, immutable",
                                     "ETag": f'"{slide_id}-{level}-{x}-{y}"'})

    @app.get("/api/slides/{slide_id}/annotations")
    def get_annotations(slide_id: str):
        if not slides.exists(slide_id):
            return _err(404, "unknown slide")
        with annotations.lock(slide_id):
            doc = annotations.load(slide_id)
        return JSONResponse(ann.to_jsonable(doc))

    @app.put("/api/slides/{slide_id}/annotations")
    def put_annotations(slide_id: str, body: dict, request: Request):
        if not slides.exists(slide_id):
            return _err(404, "unknown slide")
        if_match = request.headers.get("if-match")
        if if_match is None:
            return _err(400, "If-Match header with the base revision is required")
        try:
            base_revision = int(if_match.strip().strip('"'))
        except ValueError:
            return _err(400, "If-Match must be an integer revision")
        body = dict(body)
        body["slide_id"] = slide_id
        body.setdefault("revision", base_revision)
        try:
            doc = ann.from_jsonable(body)
        except FormatError as exc:
            return _err(400, str(exc))
        ok, result = annotations.replace(slide_id, base_revision, doc)
        if not ok:
            return _err(409, "revision conflict",
                        current=ann.to_jsonable(result))
        return {"slide_id": slide_id, "revision": result.revision}

    @app.post("/api/jobs")
    def submit_job(body: dict):
        slide_id = body.get("slide_id")
        if not isinstance(slide_id, str) or not slides.exists(slide_id):
            return _err(404, "unknown slide")
        try:
            params = _job_params(body)
            if params["backend"] is not None:
                BackendConfig.from_dict(params["backend"])  # validate now
            if params["tile_size"] not in (256, 512, 1024):
                raise ValidationError("tile_size must be 256, 512, or 1024")
            if not 0 <= params["overlap"] < params["tile_size"]:
                raise ValidationError("overlap must satisfy 0 <= overlap < tile_size")
        except (ValidationError, FormatError, TypeError) as exc:
            return _err(400, str(exc))
        job = jobs.submit(slide_id, params)
        if job is None:
            return _err(409, "a job is already queued or running on this slide")
        return JSONResponse(job.to_jsonable(), status_code=202)

    @app.get("/api/jobs")
    def list_jobs():
        return {"jobs": [j.to_jsonable() for j in jobs.list()]}

    @app.get("/api/jobs/{job_id}")
    def get_job(job_id: str):
        job = jobs.get(job_id)
        if job is None:
            return _err(404, "unknown job")
        return job.to_jsonable()

    @app.get("/api/timing.csv")
    def get_timing():
        if timing_csv.exists():
            return FileResponse(timing_csv, media_type="text/csv")
        return Response(",".join(TIMING_COLUMNS) + "\n", media_type="text/csv")

    def _confusion_for(pair: dict):
        slide_id = pair.get("slide_id")
        if not isinstance(slide_id, str) or not slides.exists(slide_id):
            raise ValidationError(f"unknown slide {slide_id!r}")
        gt_layer = pair.get("gt_layer")
        pred_layer = pair.get("pred_layer")
        if not isinstance(gt_layer, str) or not isinstance(pred_layer, str):
            raise ValidationError("gt_layer and pred_layer are required")
        with annotations.lock(slide_id):
            doc = annotations.load(slide_id)
        pyramid = slides.pyramid(slide_id)
        return doc_layer_confusion(doc, doc, gt_layer, pred_layer,
                                   (pyramid.width0, pyramid.height0))

    @app.post("/api/metrics")
    def metrics_endpoint(body: dict):
        try:
            report = metrics(_confusion_for(body))
        except ValidationError as exc:
            return _err(400, str(exc))
        out = report.to_jsonable()
        out["summary"] = report.summary()
        return out

    @app.post("/api/metrics/batch")
    def metrics_batch(body: dict):
        pairs = body.get("pairs")
        if not isinstance(pairs, list) or not pairs:
            return _err(400, "'pairs' must be a nonempty list")
        try:
            report = micro_average([_confusion_for(p) for p in pairs])
        except ValidationError as exc:
            return _err(400, str(exc))
        out = report.to_jsonable()
        out["summary"] = report.summary()
        return out

    @app.post("/api/training/export")
    def training_export(body: dict):
        slide_ids = body.get("slide_ids")
        layers = body.get("layers")
        if not isinstance(slide_ids, list) or not slide_ids:
            return _err(400, "'slide_ids' must be a nonempty list")
        if not isinstance(layers, list) or not layers:
            return _err(400, "'layers' must be a nonempty list")
        folder = body.get("folder", "training")
        out_dir = Path(folder)
        if not out_dir.is_absolute():
            out_dir = data_dir / out_dir
        patch_size = int(body.get("patch_size", 512))
        ratio = float(body.get("background_ratio", 0.0))
        seed = int(body.get("seed", 0))
        combined: TrainingManifest | None = None
        try:
            for slide_id in slide_ids:
                if not slides.exists(slide_id):
                    raise ValidationError(f"unknown slide {slide_id!r}")
                with annotations.lock(slide_id):
                    doc = annotations.load(slide_id)
                manifest = export_training_patches(
                    doc, slides.pyramid(slide_id), layers, out_dir,
                    patch_size=patch_size, background_ratio=ratio, seed=seed)
                if combined is None:
                    combined = manifest
                elif manifest.class_names != combined.class_names:
                    raise ValidationError("inconsistent class ids across slides")
                else:
                    combined.entries.extend(manifest.entries)
        except ValidationError as exc:
            return _err(400, str(exc))
        combined.save(out_dir / "manifest.json")
        return {"folder": str(out_dir), "entries": len(combined.entries),
                "class_names": combined.class_names,
                "manifest": str(out_dir / "manifest.json")}

    if static_dir is not None and Path(static_dir).is_dir():
        app.mount("/", StaticFiles(directory=str(static_dir), html=True),
                  name="frontend")

    return app
