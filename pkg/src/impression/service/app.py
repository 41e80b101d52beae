"""FastAPI service wrapping the impression pipeline.

Loaded checkpoints are cached in-process (keyed by path and mtime), so a
long-running service pays the load cost once while serving many encode,
ranking, synthesis, and translation requests. All request bodies double
as effective-configuration documents; unknown fields are rejected.
"""

from __future__ import annotations

import threading
from pathlib import Path

import numpy as np
from fastapi import FastAPI, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse

from .. import __version__
from ..codes import CodeSchema, distance, encode, encode_ensemble, load_code, save_code
from ..datasets import LabeledDataset, generate_two_domain, load_mnist, mnist_available, read_manifest
from ..errors import ConfigError, DataError, ImpressionError
from ..images import fit_to_geometry, load_image, load_image_dir, make_grid, save_image
from ..network import NetworkCheckpoint, load_checkpoint, save_checkpoint, small_spec, train_template
from ..retrieval import build_seed_code, rank_by_distance, select_top, write_ranking_csv
from ..synthesis import SynthesisConfig, synthesize
from ..translation import TASK_LAMBDAS, TranslateConfig, default_lambda, translate
from . import schemas as sm


class CheckpointCache:
    """Path-keyed checkpoint cache, invalidated by file mtime/size."""

    def __init__(self):
        self._lock = threading.Lock()
        self._entries: dict[str, tuple[tuple[int, int], NetworkCheckpoint]] = {}

    def load(self, path: str) -> NetworkCheckpoint:
        p = Path(path)
        if not p.exists():
            raise DataError(f"checkpoint {path} does not exist")
        stat = p.stat()
        key = (stat.st_mtime_ns, stat.st_size)
        with self._lock:
            cached = self._entries.get(path)
            if cached is not None and cached[0] == key:
                return cached[1]
        net = load_checkpoint(p)
        with self._lock:
            self._entries[path] = (key, net)
        return net


def _load_images(source: str, geometry: tuple[int, int, int] | None) -> tuple[list[str], np.ndarray]:
    """Resolve a file / directory / manifest into (ids, N,C,H,W batch).

    Images whose geometry differs from the template's are adapted
    (channel conversion plus bilinear resize) before use.
    """
    path = Path(source)
    if path.is_dir():
        names, images = load_image_dir(path)
    elif path.suffix.lower() in (".tsv", ".txt", ".manifest"):
        entries = read_manifest(path)
        names = [e.item_id for e in entries]
        arrays = [load_image(e.path) for e in entries]
        if geometry is not None:
            arrays = [fit_to_geometry(a, geometry) for a in arrays]
        shapes = {a.shape for a in arrays}
        if len(shapes) > 1:
            raise DataError(f"manifest {source} resolves to mixed image shapes: {sorted(shapes)}")
        return names, np.stack(arrays)
    elif path.exists():
        names, images = [path.name], load_image(path)[None]
    else:
        raise DataError(f"input {source} does not exist")
    if geometry is not None:
        images = np.stack([fit_to_geometry(img, geometry) for img in images])
    return names, images


def _write_loss_csv(path: Path, columns: list[str], rows: list[tuple]) -> None:
    lines = [",".join(columns)]
    for row in rows:
        lines.append(",".join(repr(float(v)) if isinstance(v, (int, float, np.floating)) else str(v) for v in row))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _build_training_data(req: sm.TrainRequest) -> tuple[LabeledDataset, LabeledDataset, int]:
    if req.dataset == "two-domain":
        train = generate_two_domain(req.n_per_domain, size=req.image_size, seed=req.seed)
        test = generate_two_domain(max(req.n_per_domain // 4, 1), size=req.image_size, seed=req.seed + 1)
        return train, test, 2
    if req.dataset == "mnist":
        train, test = load_mnist(download=not mnist_available())
        return train, test, 10
    entries = read_manifest(req.dataset)
    if any(e.label is None for e in entries):
        raise ConfigError(f"training manifest {req.dataset} must carry integer labels")
    try:
        labels = np.array([int(e.label) for e in entries], dtype=np.int64)
    except ValueError as exc:
        raise ConfigError(f"training labels must be integers: {exc}") from exc
    arrays = [load_image(e.path) for e in entries]
    shapes = {a.shape for a in arrays}
    if len(shapes) > 1:
        raise DataError(f"training images have mixed shapes: {sorted(shapes)}")
    images = np.stack(arrays)
    classes = int(labels.max()) + 1
    rng = np.random.default_rng(req.seed)
    order = rng.permutation(len(images))
    split = max(int(len(images) * (1 - req.holdout_fraction)), 1)
    train = LabeledDataset(images[order[:split]], labels[order[:split]], Path(req.dataset).name)
    test = LabeledDataset(images[order[split:]], labels[order[split:]], Path(req.dataset).name + "-holdout")
    if len(test) == 0:
        test = train
    return train, test, classes


def create_app() -> FastAPI:
    app = FastAPI(title="impression", version=__version__)
    cache = CheckpointCache()

    @app.exception_handler(ImpressionError)
    async def impression_error_handler(request: Request, exc: ImpressionError):
        return JSONResponse(status_code=400, content={"category": exc.category, "message": str(exc)})

    @app.exception_handler(RequestValidationError)
    async def validation_error_handler(request: Request, exc: RequestValidationError):
        return JSONResponse(status_code=422, content={"category": "config", "message": str(exc)})

    @app.get("/health", response_model=sm.HealthResponse)
    def health():
        return sm.HealthResponse(version=__version__)

    @app.get("/tasks", response_model=sm.TaskTableResponse)
    def tasks():
        return sm.TaskTableResponse(tasks=dict(TASK_LAMBDAS))

    @app.post("/train", response_model=sm.TrainResponse)
    def train(req: sm.TrainRequest):
        train_data, test_data, classes = _build_training_data(req)
        c, h, w = train_data.geometry
        if h != w:
            raise ConfigError(f"template expects square inputs, got {h}x{w}")
        spec = small_spec(c, h, classes, widths=tuple(req.widths))
        net = train_template(
            spec,
            train_data.images,
            train_data.labels,
            test_data.images,
            test_data.labels,
            epochs=req.epochs,
            lr=req.lr,
            batch_size=req.batch_size,
            seed=req.seed,
            dataset_name=train_data.name,
        )
        out = Path(req.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        fingerprint = save_checkpoint(net, out)
        return sm.TrainResponse(
            out=str(out),
            fingerprint=fingerprint,
            accuracy=net.metadata["accuracy"],
            dataset=train_data.name,
            train_count=len(train_data),
            test_count=len(test_data),
        )

    @app.post("/encode", response_model=sm.EncodeResponse)
    def encode_endpoint(req: sm.EncodeRequest):
        net = cache.load(req.net)
        geometry = (net.spec.input_channels, net.spec.input_height, net.spec.input_width)
        schema = CodeSchema.parse(req.schema_tag)
        _, images = _load_images(req.input, geometry)
        if req.ensemble:
            code = encode_ensemble(net, images, schema)
        else:
            if images.shape[0] != 1:
                raise ConfigError(
                    f"input {req.input} holds {images.shape[0]} images; pass ensemble=true to encode a set"
                )
            code = encode(net, images, schema)
        out = Path(req.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        save_code(code, out)
        return sm.EncodeResponse(
            out=str(out), dimension=code.dimension, ensemble_size=code.ensemble_size, fingerprint=code.fingerprint
        )

    @app.post("/synth", response_model=sm.SynthResponse)
    def synth(req: sm.SynthRequest):
        net = cache.load(req.net)
        target = load_code(req.target_code)
        cfg = SynthesisConfig(
            iterations=req.iters,
            learning_rate=req.lr,
            beta1=req.beta1,
            beta2=req.beta2,
            batch_size=req.batch,
            shift=req.shift,
            flip_prob=req.flip_prob,
            matching_mode=req.mode,
            seed=req.seed,
            precision=req.precision,
        )
        result = synthesize(net, target, cfg)
        out_dir = Path(req.out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        files = []
        for i, img in enumerate(result.images):
            name = f"image_{i:03d}.png"
            save_image(img, out_dir / name)
            files.append(name)
        loss_csv = out_dir / "loss.csv"
        _write_loss_csv(loss_csv, ["iteration", "loss"], list(enumerate(result.loss_trajectory, start=1)))
        return sm.SynthResponse(
            out_dir=str(out_dir),
            images=files,
            loss_csv=str(loss_csv),
            first_loss=float(result.loss_trajectory[0]),
            final_loss=float(result.loss_trajectory[-1]),
            per_image_losses=[float(v) for v in result.per_image_losses],
        )

    @app.post("/translate", response_model=sm.TranslateResponse)
    def translate_endpoint(req: sm.TranslateRequest):
        net = cache.load(req.net)
        target = load_code(req.target_code)
        if req.lam is None and req.task is None:
            raise ConfigError("either lam or task must be given")
        if req.lam is not None and req.task is not None and req.task != "custom":
            raise ConfigError("give either lam or task, not both")
        if req.task == "custom" and req.lam is None:
            raise ConfigError("task 'custom' requires an explicit lam")
        lam = req.lam if req.lam is not None else default_lambda(req.task)
        geometry = (net.spec.input_channels, net.spec.input_height, net.spec.input_width)
        names, source = _load_images(req.source, geometry)
        cfg = TranslateConfig(
            iterations=req.iters,
            learning_rate=req.lr,
            beta1=req.beta1,
            beta2=req.beta2,
            batch_size=source.shape[0],
            shift=req.shift,
            flip_prob=req.flip_prob,
            matching_mode=req.mode,
            seed=req.seed,
            precision=req.precision,
            lam=lam,
        )
        result = translate(net, source, target, cfg)
        out_dir = Path(req.out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        files = []
        for name, img in zip(names, result.images):
            out_name = f"translated_{Path(name).stem}.png"
            save_image(img, out_dir / out_name)
            files.append(out_name)
        loss_csv = out_dir / "loss.csv"
        rows = [
            (i + 1, t, m, c)
            for i, (t, m, c) in enumerate(
                zip(result.loss_trajectory, result.impression_trajectory, result.content_trajectory)
            )
        ]
        _write_loss_csv(loss_csv, ["iteration", "total", "impression", "content"], rows)
        return sm.TranslateResponse(
            out_dir=str(out_dir),
            images=files,
            loss_csv=str(loss_csv),
            lam=lam,
            first_loss=float(result.loss_trajectory[0]),
            final_loss=float(result.loss_trajectory[-1]),
            final_impression=float(result.impression_trajectory[-1]),
            final_content=float(result.content_trajectory[-1]),
        )

    @app.post("/retrieve", response_model=sm.RetrieveResponse)
    def retrieve(req: sm.RetrieveRequest):
        net = cache.load(req.net)
        schema = CodeSchema.parse(req.schema_tag)
        geometry = (net.spec.input_channels, net.spec.input_height, net.spec.input_width)
        _, seed_images = _load_images(req.seed_images, geometry)
        seed_code = build_seed_code(net, seed_images, schema)
        corpus_entries = read_manifest(req.corpus)
        ranked = rank_by_distance(net, seed_code, corpus_entries, schema)
        if not 0 <= req.n_t <= len(ranked.entries):
            raise ConfigError(f"n_t must lie in [0, {len(ranked.entries)}], got {req.n_t}")
        out = Path(req.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        write_ranking_csv(ranked, out)
        return sm.RetrieveResponse(
            out=str(out),
            ranked_count=len(ranked.entries),
            selected=select_top(ranked, req.n_t),
            skipped=[[item_id, reason] for item_id, reason in ranked.skipped],
        )

    @app.post("/gridify", response_model=sm.GridifyResponse)
    def gridify(req: sm.GridifyRequest):
        _, images = _load_images(req.inputs, None)
        grid = make_grid(images, cols=req.cols, pad=req.pad)
        out = Path(req.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        save_image(grid, out)
        cols = req.cols if req.cols is not None else int(np.ceil(np.sqrt(images.shape[0])))
        rows = (images.shape[0] + cols - 1) // cols
        return sm.GridifyResponse(out=str(out), rows=rows, cols=cols, image_count=images.shape[0])

    @app.post("/distance", response_model=sm.DistanceResponse)
    def distance_endpoint(req: sm.DistanceRequest):
        a = load_code(req.code_a)
        b = load_code(req.code_b)
        return sm.DistanceResponse(distance=distance(a, b), dimension=a.dimension)

    return app


app = create_app()
