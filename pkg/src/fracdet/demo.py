"""End-to-end toy runs: dataset, training, evaluation, heatmaps and their files."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import params as P
from .complexity import count_params
from .config import RunConfig
from .core.rng import make_rng
from .detector.model import Detector, build_model
from .detector.scenes import SyntheticScene, export_scene, generate_dataset, generate_scene, write_pgm
from .detector.train import TrainingDiverged, evaluate, heatmap, train

OVERFIT_EPOCHS = 300
OVERFIT_LR = 0.0007


@dataclass
class DemoResult:
    model: Detector
    scenes: list[SyntheticScene]
    history: list[float]
    initial_loss: float
    summary: dict = field(default_factory=dict)
    diverged: str | None = None


def child_seeds(seed: int) -> tuple[int, int, int]:
    """(dataset, model, training) seeds, all derived from the one run seed."""
    a, b, c = make_rng(seed).integers(0, 2**31 - 1, size=3)
    return int(a), int(b), int(c)


def make_dataset(cfg: RunConfig) -> list[SyntheticScene]:
    start = child_seeds(cfg.seed)[0]
    return generate_dataset(range(start, start + cfg.scenes), cfg.image_size, cfg.image_size)


def param_breakdown(model: Detector) -> dict:
    dfa = count_params(model.dfa) if model.dfa is not None else 0
    mc = count_params(model.mc) if model.mc is not None else 0
    total = count_params(model)
    return {"total": total, "dfa": dfa, "mc": mc, "backbone_head": total - dfa - mc}


def upsample(cam: np.ndarray, factor: int) -> np.ndarray:
    return np.kron(cam, np.ones((factor, factor)))


def run_demo(cfg: RunConfig) -> DemoResult:
    """Train the configured variant on the synthetic set and evaluate it on the same set."""
    _, model_seed, train_seed = child_seeds(cfg.seed)
    scenes = make_dataset(cfg)
    model = build_model(cfg.detector_config(), model_seed)
    try:
        res = train(model, scenes, cfg.epochs, cfg.lr, train_seed, batch_size=cfg.batch_size)
    except TrainingDiverged as exc:
        return DemoResult(model, scenes, exc.history, float("nan"), {}, diverged=str(exc))
    ev = evaluate(model, scenes)
    summary = {
        **ev.summary(),
        "initial_loss": res.initial_loss,
        "final_loss": res.history[-1],
        "steps": res.steps,
        "params": param_breakdown(model),
    }
    return DemoResult(model, scenes, res.history, res.initial_loss, summary)


def sample_scenes(scenes: list[SyntheticScene], k: int) -> list[int]:
    """Indices of the first ``k`` scenes that contain a fracture."""
    return [i for i, s in enumerate(scenes) if s.boxes][:k]


def write_demo_outputs(result: DemoResult, cfg: RunConfig, outdir: Path, stamp: str) -> dict[str, Path]:
    """Loss CSV, evaluation JSON, heatmaps, dataset export and the trained parameters."""
    outdir.mkdir(parents=True, exist_ok=True)
    paths = {"loss": outdir / "train-loss.csv", "eval": outdir / "train-eval.json"}
    lines = ["epoch,loss"]
    if np.isfinite(result.initial_loss):
        lines.append(f"0,{result.initial_loss!r}")
    lines += [f"{i},{v!r}" for i, v in enumerate(result.history, start=1)]
    paths["loss"].write_text("\n".join(lines) + "\n")

    data_dir = outdir / "dataset"
    for i, scene in enumerate(result.scenes):
        export_scene(scene, data_dir, f"scene-{i:04d}")

    heatmaps = []
    if result.diverged is None:
        stride = result.model.config.stride
        for i in sample_scenes(result.scenes, cfg.heatmap_samples):
            path = outdir / f"heatmap-{i:04d}.pgm"
            write_pgm(path, upsample(heatmap(result.model, result.scenes[i].image), stride))
            heatmaps.append(path.name)
        paths["params"] = outdir / "model.params"
        P.save(result.model, paths["params"], meta={"config": cfg.to_dict()})

    report = {
        "config": cfg.to_dict(),
        "timestamp": stamp,
        "status": "diverged" if result.diverged else "ok",
        "error": result.diverged,
        "epochs_completed": len(result.history),
        "variant": {"with_dfa": cfg.with_dfa, "with_mc": cfg.with_mc},
        "params": param_breakdown(result.model),
        "evaluation": result.summary,
        "heatmaps": heatmaps,
    }
    paths["eval"].write_text(json.dumps(_jsonable(report), indent=2, sort_keys=True) + "\n")
    return paths


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if np.isfinite(v) else str(v)
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


# ---------------------------------------------------------------------------
# single-image overfit


def fracture_scene(seed: int, size: int = 64) -> SyntheticScene:
    """First scene at or after ``seed`` that contains exactly one fracture box."""
    s = seed
    while True:
        scene = generate_scene(s, size, size)
        if len(scene.boxes) == 1:
            return scene
        s += 1


def overfit_single(seed: int, cfg: RunConfig | None = None, epochs: int = OVERFIT_EPOCHS, lr: float = OVERFIT_LR):
    """Overfit the configured detector on one fracture image; returns (model, scene, TrainResult)."""
    cfg = cfg or RunConfig()
    _, model_seed, train_seed = child_seeds(seed)
    scene = fracture_scene(1000 * (seed + 1), cfg.image_size)
    model = build_model(cfg.detector_config(), model_seed)
    res = train(model, [scene], epochs, lr, train_seed, batch_size=1)
    return model, scene, res


def heatmap_peak_in_box(model: Detector, scene: SyntheticScene) -> tuple[bool, tuple[int, int]]:
    """Whether the centre of the hottest heatmap cell lies inside the scene's box."""
    cam = heatmap(model, scene.image)
    r, c = np.unravel_index(int(np.argmax(cam)), cam.shape)
    stride = model.config.stride
    py, px = (r + 0.5) * stride, (c + 0.5) * stride
    x0, y0, x1, y1 = scene.boxes[0]
    return bool(x0 <= px <= x1 and y0 <= py <= y1), (int(r), int(c))
