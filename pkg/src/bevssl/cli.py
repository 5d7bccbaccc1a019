"""``bevssl`` command-line tool.

Every subcommand accepts ``--seed``, ``--config``, ``--out`` and ``--threads``
and writes one ``run_manifest.json`` into ``--out``. Exit codes: 0 success,
1 failed check, 2 configuration error.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .errors import ConfigError, InvalidSpec

log = logging.getLogger("bevssl")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2


class CheckFailed(Exception):
    """A run finished but one of its pass/fail checks did not hold."""


@dataclass
class RunManifest:
    command: str
    config_path: str | None
    config: dict
    seed: int
    argv: list[str]
    version: str = __version__
    artifacts: dict[str, str] = field(default_factory=dict)
    timings: dict[str, float] = field(default_factory=dict)
    results: dict = field(default_factory=dict)
    exit_code: int = EXIT_OK

    def write(self, out: Path) -> Path:
        out.mkdir(parents=True, exist_ok=True)
        path = out / "run_manifest.json"
        path.write_text(json.dumps(asdict(self), indent=1, sort_keys=True, default=_jsonable))
        return path


def _jsonable(x):
    if isinstance(x, np.generic):
        return x.item()
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, tuple):
        return list(x)
    return str(x)


def load_config(path, section: str) -> dict:
    """Read one section of a YAML run config; a flat file counts as that section."""
    if path is None:
        return {}
    try:
        data = yaml.safe_load(Path(path).read_text()) or {}
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"config {path} must be a mapping")
    sections = {"synth", "pretrain", "finetune", "eval", "model", "reproduce"}
    if sections & set(data):
        sec = dict(data.get(section) or {})
        if "model" in data and section in ("pretrain", "finetune"):
            sec.setdefault("model", data["model"])
        return sec
    return data


def _write_csv(path: Path, header, rows) -> Path:
    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow(header)
    w.writerows(rows)
    path.write_text(buf.getvalue())
    return path


# --------------------------------------------------------------------------
# subcommands; each fills ``m`` (the manifest) and returns nothing or raises


def cmd_synth(args, m: RunManifest):
    from .synth import SynthConfig, dataset_card, generate_dataset, save_dataset

    d = load_config(args.config, "synth")
    d["seed"] = args.seed
    for key, val in (("n_sequences", args.sequences), ("n_frames", args.frames),
                     ("bev_size", args.bev_size), ("image_width", args.image_width)):
        if val is not None:
            d[key] = val
    if args.no_occluders:
        d["occluders"] = False
    cfg = SynthConfig.from_dict(d)
    m.config = cfg.to_dict()
    t = time.perf_counter()
    ds = generate_dataset(cfg)
    m.timings["generate"] = time.perf_counter() - t
    m.artifacts["manifest"] = str(save_dataset(ds, args.out))
    card = dataset_card(ds)
    (args.out / "dataset_card.json").write_text(json.dumps(card, indent=1))
    m.artifacts["dataset_card"] = str(args.out / "dataset_card.json")
    m.results = card
    print(f"wrote {len(ds.sequences)} sequences to {args.out}")


def cmd_render(args, m: RunManifest):
    from .bev import BevGrid, LabelGrid, load_grid, one_hot
    from .geometry import default_rig, load_rig_config
    from .renderer import build_sampling_map, render, save_stack_images

    grid = load_grid(args.bev)
    if isinstance(grid, LabelGrid):
        grid = BevGrid(one_hot(grid.labels, args.classes), grid.extent, "onehot")
    if not isinstance(grid, BevGrid):
        raise ConfigError(f"{args.bev}: expected a class grid, got {type(grid).__name__}")
    rig = load_rig_config(args.rig)[0] if args.rig else default_rig(args.width, round(args.width * 288 / 512))
    smap = build_sampling_map(rig, grid.extent)
    stack = render(grid, smap)
    paths = save_stack_images(stack, args.out, rig.names, prefix=Path(args.bev).stem + "_")
    m.config = {"bev": str(args.bev), "rig": str(args.rig) if args.rig else "default", "width": args.width}
    m.artifacts.update({p.stem: str(p) for p in paths})
    print(f"rendered {len(paths)} views to {args.out}")


def cmd_gradcheck(args, m: RunManifest):
    from .experiments import gradcheck

    res = gradcheck(seed=args.seed, instances=args.instances, bev=tuple(args.bev_shape),
                    image=tuple(args.image_shape), h=args.step)
    m.config = {"instances": args.instances, "bev": args.bev_shape, "image": args.image_shape,
                "h": args.step, "tolerance": args.tolerance}
    m.results = {k: v for k, v in res.items()}
    m.timings["gradcheck"] = res["seconds"]
    ok = res["max_rel_error"] <= args.tolerance
    print(f"gradcheck: {res['instances']} instances, max relative error {res['max_rel_error']:.3e} "
          f"(tolerance {args.tolerance:g}) in {res['seconds']:.2f}s -> {'PASS' if ok else 'FAIL'}")
    if not ok:
        raise CheckFailed("gradient check exceeded tolerance")


def _train_config(args, phase: str):
    from .train import TrainConfig

    d = load_config(args.config, phase)
    d["phase"] = phase
    d["seed"] = args.seed
    for key in ("steps", "lr", "batch_size", "lambda_temp", "label_fraction"):
        val = getattr(args, key, None)
        if val is not None:
            d[key] = val
    d["checkpoint_out"] = str(args.out / f"{phase}.bevck")
    d["loss_log"] = str(args.out / f"{phase}_loss.csv")
    for stale in (d["loss_log"],):
        Path(stale).unlink(missing_ok=True)
    return TrainConfig.from_dict(d)


def _load_data(path):
    from .synth import load_dataset

    if path is None or not (Path(path) / "manifest.json").exists():
        raise ConfigError(f"no dataset at {path} (run `bevssl synth` first)")
    return load_dataset(path)


def _snapshot_callback(cfg, ds, out: Path, m: RunManifest):
    if not cfg.snapshot_every:
        return None
    from .plotting import bev_panels
    from .train import predict_frame

    def cb(step, model, rec):
        if (step + 1) % cfg.snapshot_every == 0:
            seq = ds.sequences[0]
            pred = np.argmax(predict_frame(model, ds, seq, 1), axis=-1)
            p = bev_panels({f"step {step + 1}": pred}, out / f"snapshot_{step + 1:06d}.png")
            m.artifacts[p.stem] = str(p)

    return cb


def cmd_pretrain(args, m: RunManifest):
    from .plotting import loss_curves
    from .train import pretrain

    cfg = _train_config(args, "pretrain")
    ds = _load_data(args.data)
    m.config = cfg.to_dict()
    t = time.perf_counter()
    res = pretrain(cfg, ds, callback=_snapshot_callback(cfg, ds, args.out, m))
    m.timings["train"] = time.perf_counter() - t
    if ds.gt_reads:
        raise CheckFailed("pretraining read BEV ground truth")
    m.artifacts["checkpoint"] = cfg.checkpoint_out
    m.artifacts["loss_log"] = cfg.loss_log
    m.artifacts["loss_curve"] = str(loss_curves({"pretrain": res.history}, args.out / "pretrain_loss.png"))
    m.results = {"initial_L_t": res.history[0]["L_t"], "final_L_t": res.history[-1]["L_t"],
                 "final_L_tm1": res.history[-1]["L_tm1"], "bev_gt_reads": ds.gt_reads}
    print(f"pretrain: {cfg.steps} steps, L_t {res.history[0]['L_t']:.4f} -> {res.history[-1]['L_t']:.4f}")


def cmd_finetune(args, m: RunManifest):
    from .model import load_checkpoint
    from .plotting import loss_curves
    from .train import finetune

    cfg = _train_config(args, "finetune")
    ds = _load_data(args.data)
    init = load_checkpoint(args.init) if args.init else None
    if init is not None:
        cfg = replace(cfg, model=init.model_config)
    m.config = cfg.to_dict() | {"init": str(args.init) if args.init else None}
    t = time.perf_counter()
    res = finetune(cfg, ds, init=init, callback=_snapshot_callback(cfg, ds, args.out, m))
    m.timings["train"] = time.perf_counter() - t
    m.artifacts["checkpoint"] = cfg.checkpoint_out
    m.artifacts["loss_log"] = cfg.loss_log
    m.artifacts["loss_curve"] = str(loss_curves({"finetune": res.history}, args.out / "finetune_loss.png",
                                                keys=("L_t",)))
    m.results = {"initial_loss": res.history[0]["L_t"], "final_loss": res.history[-1]["L_t"]}
    print(f"finetune: {cfg.steps} steps, loss {res.history[0]['L_t']:.4f} -> {res.history[-1]['L_t']:.4f}")


def cmd_eval(args, m: RunManifest):
    from .metrics import summary_csv, summary_table
    from .model import load_checkpoint
    from .plotting import bev_panels
    from .train import evaluate, predict_frame

    ck = load_checkpoint(args.checkpoint)
    ds = _load_data(args.data)
    model = ck.model()
    t = time.perf_counter()
    res = evaluate(model, ds)
    m.timings["eval"] = time.perf_counter() - t
    m.config = {"checkpoint": str(args.checkpoint), "data": str(args.data), "config_hash": ck.config_hash}
    name = Path(args.checkpoint).stem
    (args.out / "iou_counts.csv").write_text(res.report.to_csv())
    (args.out / "occluded_counts.csv").write_text(res.occluded.to_csv())
    (args.out / "summary.csv").write_text(summary_csv({name: res.report}))
    seq = ds.sequences[0]
    t1 = min(1, len(seq.frames) - 1)
    pred = np.argmax(predict_frame(model, ds, seq, t1), axis=-1)
    fig = bev_panels({"prediction": pred, "ground truth": seq.frames[t1].gt_bev.labels}, args.out / "bev_example.png")
    for k in ("iou_counts", "occluded_counts", "summary"):
        m.artifacts[k] = str(args.out / f"{k}.csv")
    m.artifacts["bev_example"] = str(fig)
    m.results = res.summary() | {"frames": res.n_frames}
    print(summary_table({name: res.report}))
    print(f"occluded-region mIoU: {100 * res.occluded.miou[0]:.1f}")


def cmd_profile_distance(args, m: RunManifest):
    from .geometry import DEFAULT_EXTENT, default_rig, load_rig_config
    from .metrics import distance_pixel_profile
    from .plotting import distance_profile_chart
    from .renderer import build_sampling_map

    if args.rig:
        rig, extent = load_rig_config(args.rig)
        extent = extent or DEFAULT_EXTENT
    else:
        rig, extent = default_rig(args.width, round(args.width * 288 / 512)), DEFAULT_EXTENT
    if args.camera not in rig.names:
        raise ConfigError(f"camera {args.camera!r} not in rig {rig.names}")
    prof = distance_pixel_profile(build_sampling_map(rig, extent), args.edges)
    (args.out / "distance_profile.csv").write_text(prof.to_csv())
    chart = distance_profile_chart(prof, args.out / "distance_profile.png", args.camera)
    fr = prof.camera(args.camera)
    m.config = {"rig": str(args.rig) if args.rig else "default", "camera": args.camera,
                "edges": prof.edges.tolist()}
    m.artifacts.update({"csv": str(args.out / "distance_profile.csv"), "chart": str(chart)})
    m.results = {"fractions": fr.tolist()}
    for a, b, f in zip(prof.edges[:-1], prof.edges[1:], fr):
        print(f"{args.camera} {a:5.1f}-{b:5.1f} m: {100 * f:5.1f}%")
    if not np.all(np.diff(fr) < 0):
        raise CheckFailed("pixel share does not decrease with distance")


def _rows_csv(path: Path, rows: list[dict]) -> Path:
    return _write_csv(path, list(rows[0]), [[r[k] for k in rows[0]] for r in rows])


def cmd_reproduce(args, m: RunManifest):
    from . import experiments as ex
    from . import plotting

    d = load_config(args.config, "reproduce")
    seeds = list(range(args.seed, args.seed + (args.seeds or d.get("seeds", 5))))
    try:
        budget = ex.Budget(**d.get("budget", {}))
    except TypeError as exc:
        raise ConfigError(f"bad budget section: {exc}") from exc
    data_kw = dict(d.get("data", {}))
    if args.quick:
        budget = replace(budget, supervised=30, finetune=7, pretrain_temporal=20)
        data_kw.update(n_sequences=3, n_frames=3, bev_size=32, image_width=64)
        seeds = seeds[:2]
    m.config = {"experiment": args.experiment, "seeds": seeds, "budget": asdict(budget), "data": data_kw}
    out = args.out
    t = time.perf_counter()
    name = args.experiment
    ok = True
    if name == "gradcheck":
        res = ex.gradcheck(seed=args.seed)
        ok = res["max_rel_error"] <= 1e-5
        print(f"max relative error {res['max_rel_error']:.3e}")
    elif name == "recovery":
        res = ex.free_bev_recovery(seed=args.seed, steps=200 if args.quick else 2000)
        ok = res["miou_visible"] >= 0.85
        print(f"visible-cell mIoU {res['miou_visible']:.4f} after {res['steps']} steps")
    elif name == "distance-profile":
        res = ex.distance_profile_experiment()
        (out / "distance_profile.csv").write_text(res["profile"].to_csv())
        m.artifacts["chart"] = str(plotting.distance_profile_chart(res.pop("profile"), out / "distance_profile.png",
                                                                   "CAM_FRONT"))
        ok = res["passed"]
        print("quarter fractions", ", ".join(f"{100 * f:.1f}%" for f in res["fractions"]))
    elif name == "temporal":
        res = ex.temporal_experiment(seeds, budget, data_kw=data_kw)
        m.artifacts["csv"] = str(_rows_csv(out / "temporal.csv", res["rows"]))
        m.artifacts["chart"] = str(plotting.seed_deltas([r["delta_occluded"] for r in res["rows"]], seeds,
                                                        out / "temporal_deltas.png", "occluded mIoU delta [pp]"))
        ok = res["passed"]
        for r in res["rows"]:
            print(f"seed {r['seed']}: temporal {100 * r['temporal_occluded_miou']:.1f}  "
                  f"no temporal {100 * r['no_temporal_occluded_miou']:.1f}  delta {100 * r['delta_occluded']:+.1f}pp")
        print(f"mean delta {100 * res['mean_delta']:+.2f}pp")
    elif name == "two-phase":
        res = ex.two_phase_experiment(seeds, budget, data_kw=data_kw)
        m.artifacts["csv"] = str(_rows_csv(out / "two_phase.csv", res["rows"]))
        arms = ("supervised", "pretrain_only", "two_phase", "two_phase_third")
        m.artifacts["chart"] = str(plotting.miou_bars(
            {a: {"mIoU20": res["mean"][f"{a}_miou20"], "mIoU60": res["mean"][f"{a}_miou60"]} for a in arms},
            out / "two_phase.png"))
        ok = res["passed_full"] and res["passed_third"]
        print("arm                mIoU20  mIoU60")
        for a in arms:
            print(f"{a:18s} {100 * res['mean'][a + '_miou20']:6.1f}  {100 * res['mean'][a + '_miou60']:6.1f}")
    elif name == "pretrain-sweep":
        lengths = args.sweep or d.get("sweep", [budget.pretrain_short, budget.pretrain_full // 2, budget.pretrain_full])
        res = ex.pretrain_sweep(lengths, seeds, budget, data_kw=data_kw)
        m.artifacts["csv"] = str(_rows_csv(out / "pretrain_sweep.csv", res["rows"]))
        for r in res["rows"]:
            print(f"seed {r['seed']} pretrain {r['pretrain_steps']:5d}: mIoU60 {100 * r['miou60']:.1f}")
    else:
        raise ConfigError(f"unknown experiment {name!r}; choose from {', '.join(ex.EXPERIMENTS)}")
    m.timings[name] = time.perf_counter() - t
    (out / f"{name}.json").write_text(json.dumps(res, indent=1, default=_jsonable))
    m.artifacts["json"] = str(out / f"{name}.json")
    m.results = {k: v for k, v in res.items() if k != "rows"}
    print(f"{name}: {'PASS' if ok else 'FAIL'}")
    if not ok:
        raise CheckFailed(f"{name} check failed")


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--config", type=Path, help="YAML run config (flat or with per-command sections)")
    common.add_argument("--out", type=Path, default=Path("out"), help="output directory")
    common.add_argument("--threads", type=int, default=1, help="BLAS/OpenMP thread cap")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="bevssl", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    s.add_argument("--sequences", type=int)
    s.add_argument("--frames", type=int)
    s.add_argument("--bev-size", type=int)
    s.add_argument("--image-width", type=int)
    s.add_argument("--no-occluders", action="store_true")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("render", parents=[common], help="render a BEV grid file into the rig cameras")
    s.add_argument("bev", type=Path)
    s.add_argument("--rig", type=Path)
    s.add_argument("--width", type=int, default=512)
    s.add_argument("--classes", type=int, default=4)
    s.set_defaults(func=cmd_render)

    s = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of the renderer VJP")
    s.add_argument("--instances", type=int, default=20)
    s.add_argument("--bev-shape", type=int, nargs=3, default=(8, 8, 3), metavar=("ROWS", "COLS", "C"))
    s.add_argument("--image-shape", type=int, nargs=2, default=(16, 12), metavar=("W", "H"))
    s.add_argument("--step", type=float, default=1e-4)
    s.add_argument("--tolerance", type=float, default=1e-5)
    s.set_defaults(func=cmd_gradcheck)

    for phase, func in (("pretrain", cmd_pretrain), ("finetune", cmd_finetune)):
        s = sub.add_parser(phase, parents=[common], help=f"{phase} the lifting model")
        s.add_argument("--data", type=Path, required=True, help="dataset directory from `synth`")
        s.add_argument("--steps", type=int)
        s.add_argument("--lr", type=float)
        s.add_argument("--batch-size", type=int)
        if phase == "pretrain":
            s.add_argument("--lambda-temp", type=float)
        else:
            s.add_argument("--label-fraction", type=float)
            s.add_argument("--init", type=Path, help="pretrained checkpoint; omit for the supervised baseline")
        s.set_defaults(func=func)

    s = sub.add_parser("eval", parents=[common], help="IoU report of a checkpoint on a dataset")
    s.add_argument("--data", type=Path, required=True)
    s.add_argument("--checkpoint", type=Path, required=True)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("profile-distance", parents=[common], help="pixel share per ground-distance bin")
    s.add_argument("--rig", type=Path)
    s.add_argument("--camera", default="CAM_FRONT")
    s.add_argument("--width", type=int, default=512)
    s.add_argument("--edges", type=float, nargs="+", help="bin edges in meters (default: quarters)")
    s.set_defaults(func=cmd_profile_distance)

    s = sub.add_parser("reproduce", parents=[common], help="run a named experiment end to end")
    s.add_argument("experiment", choices=("gradcheck", "recovery", "temporal", "two-phase",
                                          "distance-profile", "pretrain-sweep"))
    s.add_argument("--seeds", type=int, help="number of seeds, counted up from --seed")
    s.add_argument("--quick", action="store_true", help="tiny budgets for smoke runs")
    s.add_argument("--sweep", type=int, nargs="+", help="pretraining lengths for pretrain-sweep")
    s.set_defaults(func=cmd_reproduce)
    return p


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    args.out.mkdir(parents=True, exist_ok=True)
    m = RunManifest(args.command, str(args.config) if args.config else None, {}, args.seed, argv)
    t0 = time.perf_counter()
    from threadpoolctl import threadpool_limits

    try:
        with threadpool_limits(limits=args.threads):
            args.func(args, m)
    except CheckFailed as exc:
        print(f"error: {exc}", file=sys.stderr)
        m.exit_code = EXIT_FAIL
    except (ConfigError, InvalidSpec, FileNotFoundError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        m.exit_code = EXIT_CONFIG
    m.timings["total"] = time.perf_counter() - t0
    m.write(args.out)
    return m.exit_code


if __name__ == "__main__":
    sys.exit(main())
