"""Training, inference and evaluation runs built from the individual modules."""
from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from . import data as D
from . import engine as E
from . import proxy as P
from .errors import BadK, InsufficientViews, MfosError, ParseError
from .geom import Intrinsics, Pose
from .loss import LossConfig, final_loss
from .metrics import MetricConfig, QueryResult, evaluate_query, report
from .model import MFOS, PRESETS, ModelConfig, PredictionMaps
from .pnp import PnPConfig, extract_correspondences, robust_pnp
from .select import farthest_sample


# --------------------------------------------------------------------------
# configuration

@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    seed: int = 0
    b: int = 2
    n_q: int = 2
    n_r: int = 4
    n_random: Optional[int] = None
    lr: float = 1e-3
    min_lr: float = 1e-5
    warmup_frac: float = 0.05
    betas: tuple = (0.9, 0.95)
    weight_decay: float = 0.05
    background_error: float = 1.0
    conf_clamp: float = 5.0
    frame_rotate: bool = False
    frame_trans: float = 0.0
    frame_scale: float = 0.0
    crop_shift: float = 0.0
    crop_scale: float = 0.0
    crop_rotation: float = 0.0
    holdout_every: int = 8
    ckpt_every: int = 250
    best_window: int = 50

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))

    @property
    def batch(self) -> D.BatchSpec:
        return D.BatchSpec(self.b, self.n_q, self.n_r, self.n_random)

    @property
    def augment(self) -> D.AugmentConfig:
        return D.AugmentConfig(self.frame_rotate, self.frame_trans, self.frame_scale,
                               D.CropAugment(self.crop_shift, self.crop_scale, self.crop_rotation))

    @property
    def loss(self) -> LossConfig:
        return LossConfig(self.background_error, self.conf_clamp)

    def to_json(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ParseError(f"unknown training options: {sorted(unknown)}")
        return cls(**d)


TRAIN_PRESETS = {
    # 40 epochs, 1000 steps each; 4 warmup epochs
    "paper": TrainConfig(steps=40000, b=16, n_q=16, n_r=32, n_random=8, lr=1e-4, min_lr=1e-6,
                         warmup_frac=0.1, frame_rotate=True, frame_trans=0.1, frame_scale=0.1,
                         crop_shift=0.1, crop_scale=0.1, crop_rotation=10.0, holdout_every=0,
                         ckpt_every=1000, best_window=1000),
    "toy": TrainConfig(lr=2e-3, min_lr=1e-4, warmup_frac=0.02),
}


def preset_config(name: str) -> dict:
    """Full run configuration for a preset, as emitted by ``mfos config``."""
    if name not in PRESETS:
        raise ParseError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    t = TRAIN_PRESETS[name]
    out = {"preset": name, "model": PRESETS[name].to_json(), "train": t.to_json(),
           "pnp": asdict(PnPConfig()), "metrics": asdict(MetricConfig())}
    out["metrics"]["cmdeg"] = [list(p) for p in out["metrics"]["cmdeg"]]
    if name == "paper":
        out["schedule"] = {"epochs": 40, "steps_per_epoch": 1000, "warmup_epochs": 4}
    out["batch_images"] = t.batch.images
    return out


# --------------------------------------------------------------------------
# training

def _to_tensor(x: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(x)).to(dtype)


def train_step(model: MFOS, batch: D.Batch, cfg: TrainConfig, lr: float) -> float:
    pred = model.forward_batch(_to_tensor(batch.q_img), _to_tensor(batch.r_img),
                               _to_tensor(batch.r_map))
    loss = final_loss(pred, _to_tensor(batch.q_coords), torch.from_numpy(batch.q_mask), cfg.loss)
    E.backward(loss, model.store)
    E.adamw_step(model.store, lr, cfg.betas, cfg.weight_decay)
    return float(loss.detach())


def _rng_from_state(state: dict) -> np.random.Generator:
    rng = np.random.default_rng()
    rng.bit_generator.state = state
    return rng


@dataclass
class TrainResult:
    final: Path
    best: Path
    curve: Path
    losses: list = field(default_factory=list)
    seconds: float = 0.0


def sibling(path: Path, suffix: str) -> Path:
    return path.with_name(path.stem + suffix)


def train(manifest, ckpt_out, cfg: TrainConfig = TrainConfig(),
          model_cfg: ModelConfig = PRESETS["toy"], resume=None,
          stop_at: Optional[int] = None, log: Optional[Callable[[str], None]] = None) -> TrainResult:
    """Train and write ``ckpt_out``, ``<stem>.best.ckpt`` and ``<stem>.loss.json``.

    ``resume`` continues bitwise from a checkpoint (weights, optimizer moments,
    step, generator state and loss history). ``stop_at`` ends the run early
    while keeping the schedule of ``cfg.steps``.
    """
    t0 = time.perf_counter()
    ckpt_out = Path(ckpt_out)
    objs = D.load_manifest(manifest)
    pools = {o.id: D.split_views(len(o.views), cfg.holdout_every)[0] for o in objs}
    images = D.ImageCache()
    if resume is not None:
        store, header = E.load_checkpoint(resume)
        model_cfg = ModelConfig.from_json(header["model"])
        cfg = TrainConfig.from_json(header["train"])
        rng = _rng_from_state(header["rng"])
        losses = list(header.get("losses", []))
        best_val = header.get("best")
        best_val = math.inf if best_val is None else best_val
        model = MFOS(model_cfg, store)
    else:
        model = MFOS(model_cfg, seed=cfg.seed)
        rng = np.random.default_rng(cfg.seed)
        losses, best_val = [], math.inf
    best_path = sibling(ckpt_out, ".best.ckpt")
    curve_path = sibling(ckpt_out, ".loss.json")

    def header(best):
        return {"model": model_cfg.to_json(), "train": cfg.to_json(),
                "rng": rng.bit_generator.state, "losses": losses,
                "best": best if math.isfinite(best) else None}

    end = cfg.steps if stop_at is None else min(stop_at, cfg.steps)
    if model.store.step == 0 and not best_path.exists():
        E.save_checkpoint(best_path, model.store, header(best_val))
    spec = cfg.batch
    for step in range(model.store.step, end):
        batch = D.make_batch(objs, spec, rng, model_cfg.img_res, cfg.augment, pools, images)
        lr = E.cosine_lr(step, cfg.steps, cfg.lr, cfg.min_lr, cfg.warmup_frac)
        loss = train_step(model, batch, cfg, lr)
        if not math.isfinite(loss):
            raise FloatingPointError(f"non-finite loss {loss} at step {step}")
        losses.append(loss)
        if log is not None:
            log(json.dumps({"step": step, "loss": loss, "lr": lr}))
        done = step + 1
        if len(losses) >= cfg.best_window and (done % cfg.ckpt_every == 0 or done == end):
            window = float(np.mean(losses[-cfg.best_window:]))
            if window < best_val:
                best_val = window
                E.save_checkpoint(best_path, model.store, header(best_val))
    E.save_checkpoint(ckpt_out, model.store, header(best_val))
    curve = {"steps": list(range(len(losses))), "loss": losses,
             "lr": [E.cosine_lr(s, cfg.steps, cfg.lr, cfg.min_lr, cfg.warmup_frac)
                    for s in range(len(losses))]}
    curve_path.write_text(json.dumps(curve))
    return TrainResult(ckpt_out, best_path, curve_path, losses, time.perf_counter() - t0)


def loss_drop(losses: Sequence[float], head: int = 10, tail: int = 50) -> float:
    """Relative decrease from the mean of the first ``head`` to the mean of the last ``tail``."""
    if len(losses) < head + tail:
        raise ValueError(f"need at least {head + tail} losses, have {len(losses)}")
    first = float(np.mean(losses[:head]))
    last = float(np.mean(losses[-tail:]))
    return (first - last) / abs(first)


def load_model(ckpt) -> MFOS:
    store, header = E.load_checkpoint(ckpt)
    if "model" not in header:
        raise ParseError(f"{ckpt}: checkpoint header lacks a model config")
    return MFOS(ModelConfig.from_json(header["model"]), store)


# --------------------------------------------------------------------------
# inference

@dataclass
class Prepared:
    image: np.ndarray
    k: Intrinsics
    pose: Pose
    pointmap: P.PointMap
    rotation: np.ndarray


def prepare(obj: D.ObjectRecord, vi: int, res: int, images: D.ImageCache,
            shape: Optional[P.ProxyShape] = None) -> Prepared:
    v = D.prepare_view(obj, obj.views[vi], shape or obj.proxy, res, images, None, None)
    return Prepared(v.image, v.intrinsics, v.pose, v.pointmap, v.rotation)


def choose_references(obj: D.ObjectRecord, query: int, k: int, pool: Optional[Sequence[int]] = None,
                      refs: Optional[Sequence[int]] = None, metric: str = "view") -> list[int]:
    """Explicit ``refs`` (validated) or ``k`` farthest-sampled views from ``pool``."""
    n = len(obj.views)
    if refs is not None:
        refs = [int(r) for r in refs]
        if query in refs:
            raise BadK(f"query view {query} is also a reference view")
        if any(not 0 <= r < n for r in refs) or len(set(refs)) != len(refs):
            raise BadK(f"reference indices must be distinct and in [0, {n})")
        return refs
    cand = [i for i in (range(n) if pool is None else pool) if i != query]
    if k > len(cand):
        raise InsufficientViews(f"object {obj.id}: K={k} but only {len(cand)} candidate views")
    return [cand[i] for i in farthest_sample([obj.views[i].pose for i in cand], k, 0, metric)]


Predictor = Callable[[D.ObjectRecord, Prepared, list], PredictionMaps]


def model_predictor(model: MFOS) -> Predictor:
    @torch.no_grad()
    def predict(obj, query: Prepared, refs: list) -> PredictionMaps:
        return model.forward(query.image, [(r.image, r.pointmap.coords) for r in refs])
    return predict


def oracle_predictor(obj, query: Prepared, refs: list) -> PredictionMaps:
    """Ground-truth coordinates with saturated confidence: a pass-through test hook."""
    pm = query.pointmap
    conf = np.where(pm.mask, 5.0, -5.0)
    return PredictionMaps(torch.from_numpy(pm.coords), torch.from_numpy(conf))


@dataclass
class InferResult:
    pose: Pose
    inliers: int
    candidates: int
    refs: list
    trials: int
    maps: Optional[PredictionMaps] = None

    def to_json(self) -> dict:
        return {**self.pose.to_json(), "inliers": self.inliers, "candidates": self.candidates,
                "inlier_ratio": self.inliers / max(self.candidates, 1), "refs": self.refs,
                "ransac_trials": self.trials}


def infer_query(predict: Predictor, obj: D.ObjectRecord, query: int, refs: Sequence[int],
                res: int, pnp_cfg: PnPConfig, rng: np.random.Generator,
                images: Optional[D.ImageCache] = None) -> InferResult:
    """Pose of view ``query`` in its original camera, from the given reference views."""
    images = images or D.ImageCache()
    q = prepare(obj, query, res, images)
    ref_views = [prepare(obj, r, res, images) for r in refs]
    maps = predict(obj, q, ref_views)
    c = extract_correspondences(maps, pnp_cfg).to_metric(obj.proxy.frame)
    pose, mask, info = robust_pnp(c, q.k, pnp_cfg, rng, return_info=True)
    pose = Pose(q.rotation.T @ pose.r, q.rotation.T @ pose.t)  # back to the original camera
    return InferResult(pose, int(mask.sum()), len(c), list(refs), info.trials, maps)


# --------------------------------------------------------------------------
# evaluation

SUCCESS_DEG = 20.0
SUCCESS_TRANS_FRAC = 0.1


def _finite_or_none(x):
    return None if x is None or not math.isfinite(x) else float(x)


def evaluate(predict: Predictor, objs: Sequence[D.ObjectRecord], k: int, res: int,
             split: str = "test", seed: int = 0, pnp_cfg: PnPConfig = PnPConfig(),
             metric_cfg: MetricConfig = MetricConfig(), holdout_every: int = 8,
             max_queries: Optional[int] = None) -> dict:
    """Run every query of ``split`` and aggregate. Per-query failures are recorded, not raised.

    References are farthest-sampled from the training views of the same object.
    """
    if split not in ("test", "train", "all"):
        raise ParseError(f"unknown split {split!r}")
    images = D.ImageCache()
    rows = []
    rot, trans = [], []
    for obj in objs:
        train_idx, test_idx = D.split_views(len(obj.views), holdout_every)
        queries = {"test": test_idx, "train": train_idx, "all": list(range(len(obj.views)))}[split]
        if max_queries is not None:
            queries = queries[:max_queries]
        for qi in queries:
            rng = np.random.default_rng([seed, qi])
            gt = obj.views[qi].pose
            extra, pred, err = {}, None, None
            try:
                refs = choose_references(obj, qi, k, train_idx)
                res_ = infer_query(predict, obj, qi, refs, res, pnp_cfg, rng, images)
                pred = res_.pose
                extra = {"inliers": res_.inliers, "candidates": res_.candidates}
            except MfosError as e:
                err = f"{type(e).__name__}: {e}"
            q = QueryResult(obj.id, qi, gt, pred, obj.views[qi].intrinsics, obj.model_pts,
                            obj.diameter, obj.symmetric, err, extra)
            row = evaluate_query(q, metric_cfg)
            rot.append(math.inf if pred is None else row["deg"])
            dia = obj.diameter if obj.diameter is not None else float(
                2 * np.linalg.norm(obj.proxy.frame.half_extents))
            trans.append(math.inf if pred is None else
                         float(np.linalg.norm(pred.t - gt.t)) / dia)
            rows.append(row)
    out = report(rows, metric_cfg)
    ok = [r <= SUCCESS_DEG and t <= SUCCESS_TRANS_FRAC for r, t in zip(rot, trans)]
    out["median"] = {"rot_deg": _finite_or_none(float(np.median(rot))) if rot else None,
                     "trans_frac": _finite_or_none(float(np.median(trans))) if trans else None}
    out["success"] = {"rot_deg": SUCCESS_DEG, "trans_frac": SUCCESS_TRANS_FRAC,
                      "rate": float(np.mean(ok)) if ok else 0.0}
    out["failures"] = sum(r["ok"] is False for r in rows)
    out["settings"] = {"K": k, "split": split, "seed": seed, "pnp": asdict(pnp_cfg)}
    out["queries"] = [_clean_row(r) for r in rows]
    return out


def _clean_row(r: dict) -> dict:
    return {k: (_finite_or_none(v) if isinstance(v, float) else v) for k, v in r.items()}


def report_schema() -> dict:
    from importlib import resources

    return json.loads(resources.files("mfos").joinpath("report.schema.json").read_text())


__all__ = ["TrainConfig", "TRAIN_PRESETS", "preset_config", "train", "train_step", "loss_drop",
           "load_model", "choose_references", "model_predictor", "oracle_predictor",
           "infer_query", "InferResult", "evaluate", "report_schema"]
