"""Command-line entry point: ``mfos <subcommand> ...``.

Exit codes: 0 success, 1 usage, 2 data error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import data as D
from . import engine as E
from . import pipeline as PL
from . import proxy as P
from .errors import IoError, MfosError, ParseError
from .model import PRESETS
from .pnp import PnPConfig
from .select import distance_matrix, farthest_sample, min_pairwise

EXIT_USAGE = 1


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _emit(obj, out: str | None = None) -> None:
    text = json.dumps(obj, indent=2)
    if out:
        try:
            Path(out).write_text(text + "\n")
        except OSError as e:
            raise IoError(f"cannot write {out}: {e}") from e
    else:
        print(text)


def _positive(s: str) -> int:
    v = int(s)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {s}")
    return v


def _nonneg(s: str) -> int:
    v = int(s)
    if v < 0:
        raise argparse.ArgumentTypeError(f"expected a nonnegative integer, got {s}")
    return v


# --------------------------------------------------------------------------
# subcommands

def cmd_synth(a) -> int:
    path = D.synth_generate(a.n_objects, a.views, a.res, np.random.default_rng(a.seed), a.out)
    _emit({"manifest": str(path), "objects": a.n_objects, "views": a.views, "res": a.res})
    return 0


TRAIN_FLAGS = {"steps": "steps", "seed": "seed", "B": "b", "nq": "n_q", "nr": "n_r",
               "n_random": "n_random", "lr": "lr", "min_lr": "min_lr",
               "warmup_frac": "warmup_frac", "weight_decay": "weight_decay"}


def resolve_train_config(a) -> PL.TrainConfig:
    """Preset defaults, then the config file, then explicit flags."""
    cfg = PL.TRAIN_PRESETS[a.preset]
    if a.config:
        try:
            doc = json.loads(Path(a.config).read_text())
        except FileNotFoundError as e:
            raise IoError(f"config file not found: {a.config}") from e
        except json.JSONDecodeError as e:
            raise ParseError(f"{a.config}: {e}") from e
        cfg = PL.TrainConfig.from_json({**cfg.to_json(), **doc.get("train", doc)})
    flags = {field: getattr(a, flag) for flag, field in TRAIN_FLAGS.items()
             if getattr(a, flag) is not None}
    return replace(cfg, **flags)


def cmd_train(a) -> int:
    cfg = resolve_train_config(a)
    log = None
    if a.log:
        fh = open(a.log, "w")
        log = lambda line: print(line, file=fh, flush=True)  # noqa: E731
    res = PL.train(a.manifest, a.ckpt_out, cfg, PRESETS[a.preset], resume=a.resume, log=log)
    losses = res.losses
    _emit({"checkpoint": str(res.final), "best": str(res.best), "loss_curve": str(res.curve),
           "steps": len(losses), "first_loss": losses[0] if losses else None,
           "last_loss": losses[-1] if losses else None, "seconds": round(res.seconds, 2)})
    return 0


def _pnp_cfg(a) -> PnPConfig:
    return PnPConfig(conf_threshold=a.conf_threshold)


def cmd_infer(a) -> int:
    objs = D.load_manifest(a.manifest)
    obj = D.find_object(objs, a.object_id)
    if not 0 <= a.query_index < len(obj.views):
        raise UsageError(f"query index {a.query_index} out of range [0, {len(obj.views)})")
    model = PL.load_model(a.ckpt)
    refs = PL.choose_references(obj, a.query_index, a.K, refs=a.refs)
    res = PL.infer_query(PL.model_predictor(model), obj, a.query_index, refs, model.cfg.img_res,
                         _pnp_cfg(a), np.random.default_rng(a.seed))
    out = {"object": obj.id, "query": a.query_index, **res.to_json()}
    if a.dump_maps:
        d = Path(a.dump_maps)
        d.mkdir(parents=True, exist_ok=True)
        coords = res.maps.coords.detach().numpy()
        tau = np.exp(np.clip(res.maps.conf_raw.detach().numpy(), -5, 5))
        D.write_image(d / "coords.png", coords_to_rgb(coords))
        D.write_image(d / "conf.png", np.repeat((np.log(tau) / 10 + 0.5)[..., None], 3, -1))
        D.write_array(d / "coords.bin", coords.astype(np.float32))
        D.write_array(d / "conf.bin", tau.astype(np.float32))
        out["maps"] = str(d)
    _emit(out)
    return 0


def cmd_eval(a) -> int:
    objs = D.load_manifest(a.manifest)
    model = PL.load_model(a.ckpt)
    rep = PL.evaluate(PL.model_predictor(model), objs, a.K, model.cfg.img_res, a.split, a.seed,
                      _pnp_cfg(a), holdout_every=a.holdout_every)
    _emit(rep, a.out_report)
    if a.out_report:
        _emit({"report": a.out_report, "median": rep["median"], "mean": rep["mean"]})
    return 0


def coords_to_rgb(coords: np.ndarray) -> np.ndarray:
    """[-1, 1] -> [0, 255] per channel."""
    return np.clip(np.rint((np.asarray(coords) + 1.0) * 127.5), 0, 255).astype(np.uint8)


def rgb_to_coords(rgb: np.ndarray) -> np.ndarray:
    return np.asarray(rgb, dtype=np.float64) / 127.5 - 1.0


def cmd_render_proxy(a) -> int:
    obj = D.find_object(D.load_manifest(a.manifest), a.object_id)
    if not 0 <= a.view_index < len(obj.views):
        raise UsageError(f"view index {a.view_index} out of range [0, {len(obj.views)})")
    v = obj.views[a.view_index]
    mesh = P.box_mesh(obj.proxy.frame) if a.shape_kind == "mesh" and obj.proxy.mesh is None \
        else obj.proxy.mesh
    shape = P.ProxyShape(a.shape_kind, obj.proxy.frame, mesh)
    pm = P.render_pointmap(shape, v.pose, v.intrinsics, (v.intrinsics.height, v.intrinsics.width))
    out = Path(a.out)
    coords_path, mask_path = sibling_png(out, "coords"), sibling_png(out, "mask")
    rgb = np.where(pm.mask[..., None], coords_to_rgb(pm.coords), 0).astype(np.uint8)
    D.write_image(coords_path, rgb)
    D.write_image(mask_path, np.repeat((pm.mask * 255).astype(np.uint8)[..., None], 3, -1))
    _emit({"coords": str(coords_path), "mask": str(mask_path), "kind": a.shape_kind,
           "hits": int(pm.mask.sum()), "width": v.intrinsics.width, "height": v.intrinsics.height})
    return 0


def sibling_png(out: Path, tag: str) -> Path:
    stem = out.name[:-4] if out.name.endswith(".png") else out.name
    return out.with_name(f"{stem}.{tag}.png")


def cmd_select_views(a) -> int:
    obj = D.find_object(D.load_manifest(a.manifest, check_files=False), a.object_id)
    poses = obj.poses()
    idx = farthest_sample(poses, a.K, a.seed_index, a.metric)
    _emit({"object": obj.id, "indices": idx,
           "min_distance_deg": min_pairwise(distance_matrix(poses, a.metric), idx)
           if len(idx) > 1 else None})
    return 0


def cmd_config(a) -> int:
    _emit(PL.preset_config(a.preset), a.out)
    return 0


# --------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    p = _Parser(prog="mfos", description="One-shot object pose estimation from pose-annotated "
                                         "reference views.", formatter_class=fmt)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a synthetic dataset of colored boxes",
                       formatter_class=fmt)
    s.add_argument("--n-objects", type=_positive, default=8, help="number of objects")
    s.add_argument("--views", type=_positive, default=64, help="views per object")
    s.add_argument("--res", type=_positive, default=64, help="image side in pixels")
    s.add_argument("--seed", type=int, default=0, help="random seed")
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(fn=cmd_synth)

    t = sub.add_parser("train", formatter_class=fmt,
                       help="train a model; flags override --config, which overrides the preset")
    t.add_argument("--manifest", required=True, help="dataset manifest JSON")
    t.add_argument("--preset", choices=sorted(PRESETS), default="toy",
                   help="model and schedule preset (see `mfos config`)")
    t.add_argument("--config", help="JSON file with training options (keys as in `mfos config`)")
    t.add_argument("--ckpt-out", required=True, help="final checkpoint path")
    t.add_argument("--resume", help="continue from this checkpoint")
    t.add_argument("--log", help="write one JSON line per step here")
    toy, paper = PL.TRAIN_PRESETS["toy"], PL.TRAIN_PRESETS["paper"]
    for flag, field, typ, helptext in [
            ("steps", "steps", _nonneg, "optimizer steps"),
            ("seed", "seed", int, "random seed"),
            ("B", "b", _positive, "objects per batch"),
            ("nq", "n_q", _positive, "query views per object"),
            ("nr", "n_r", _positive, "reference views per object"),
            ("n-random", "n_random", _nonneg, "random picks among the references (None: nr/4)"),
            ("lr", "lr", float, "base learning rate"),
            ("min-lr", "min_lr", float, "final learning rate of the cosine schedule"),
            ("warmup-frac", "warmup_frac", float, "fraction of steps in linear warmup"),
            ("weight-decay", "weight_decay", float, "AdamW weight decay")]:
        t.add_argument(f"--{flag}", type=typ, default=None,
                       help=f"{helptext} (toy: {getattr(toy, field)}, paper: {getattr(paper, field)})")
    t.set_defaults(fn=cmd_train)

    def pnp_flags(sp):
        sp.add_argument("--conf-threshold", type=float, default=PnPConfig().conf_threshold,
                        help="minimum confidence of a correspondence")
        sp.add_argument("--seed", type=int, default=0, help="random seed for RANSAC")

    i = sub.add_parser("infer", help="estimate the pose of one query view", formatter_class=fmt)
    i.add_argument("--manifest", required=True, help="dataset manifest JSON")
    i.add_argument("--object-id", required=True, help="object id in the manifest")
    i.add_argument("--query-index", type=_nonneg, required=True, help="view index of the query")
    i.add_argument("-K", "--K", type=_positive, default=4, help="number of reference views")
    i.add_argument("--refs", type=_nonneg, nargs="+",
                   help="explicit reference view indices (overrides -K)")
    i.add_argument("--ckpt", required=True, help="model checkpoint")
    i.add_argument("--dump-maps", help="directory for coordinate and confidence images")
    pnp_flags(i)
    i.set_defaults(fn=cmd_infer)

    e = sub.add_parser("eval", help="evaluate every query of a split", formatter_class=fmt)
    e.add_argument("--manifest", required=True, help="dataset manifest JSON")
    e.add_argument("--ckpt", required=True, help="model checkpoint")
    e.add_argument("-K", "--K", type=_positive, default=4, help="number of reference views")
    e.add_argument("--split", choices=["test", "train", "all"], default="test",
                   help="query views: held-out, training, or all")
    e.add_argument("--holdout-every", type=_nonneg, default=8,
                   help="every n-th view (offset n-1) is held out; 0 disables")
    e.add_argument("--out-report", help="write the report here instead of stdout")
    pnp_flags(e)
    e.set_defaults(fn=cmd_eval)

    r = sub.add_parser("render-proxy", help="render the proxy pointmap of one view",
                       formatter_class=fmt)
    r.add_argument("--manifest", required=True, help="dataset manifest JSON")
    r.add_argument("--object-id", required=True, help="object id in the manifest")
    r.add_argument("--view-index", type=_nonneg, required=True, help="view to render")
    r.add_argument("--shape-kind", choices=list(P.KINDS), default="cuboid", help="proxy shape")
    r.add_argument("--out", required=True,
                   help="output prefix; writes <out>.coords.png and <out>.mask.png")
    r.set_defaults(fn=cmd_render_proxy)

    v = sub.add_parser("select-views", help="greedy farthest reference selection",
                       formatter_class=fmt)
    v.add_argument("--manifest", required=True, help="dataset manifest JSON")
    v.add_argument("--object-id", required=True, help="object id in the manifest")
    v.add_argument("-K", "--K", type=_positive, default=4, help="number of views")
    v.add_argument("--seed-index", type=_nonneg, default=0, help="first selected view")
    v.add_argument("--metric", choices=["view", "so3"], default="view",
                   help="viewing-direction angle or rotation geodesic")
    v.set_defaults(fn=cmd_select_views)

    c = sub.add_parser("config", help="print the full configuration of a preset",
                       formatter_class=fmt)
    c.add_argument("--preset", choices=sorted(PRESETS), default="paper", help="preset name")
    c.add_argument("--out", help="write to this file instead of stdout")
    c.set_defaults(fn=cmd_config)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    E.set_threads_from_env()
    try:
        return args.fn(args)
    except UsageError as e:
        print(f"mfos {args.command}: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except MfosError as e:
        print(f"mfos {args.command}: {type(e).__name__}: {e}", file=sys.stderr)
        return e.exit_code
    except (ValueError, OSError) as e:
        print(f"mfos {args.command}: {type(e).__name__}: {e}", file=sys.stderr)
        return 2
    except FloatingPointError as e:
        print(f"mfos {args.command}: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
