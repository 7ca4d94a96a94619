"""Command-line entry points.

    s2tpv [--config PATH] [--seed N] [--out DIR] <command> [options]

Exit status is 0 on success, 1 on validation/usage errors and 2 when a
numeric failure (non-finite loss or activation) aborts the run.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

from .encoder import PRESETS, EncoderConfig
from .errors import ConfigError, NumericError, S2TPVError
from .evaluation import (
    ablate_temporal_range, emit_heatmap, evaluate, gain_vs_count, write_ablation_csv, write_gain_csv,
    write_prediction,
)
from .model import OccupancyModel
from .selftest import run_selftest
from .synthetic import (
    RenderConfig, SceneDataset, load_scenes, occlusion_benchmark, occlusion_training_set, occlusion_world,
    random_world, save_scenes,
)
from .training import TrainConfig, frame_targets, save_config, train

log = logging.getLogger("s2tpv")

CONFIG_FORMAT = "s2tpv-config"
DEFAULT_DATA = {"kind": "training", "n_scenes": 40, "n_frames": 2, "seed": 5000}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def parse_m_values(text: str) -> list[int]:
    """``"0..7"`` (inclusive range) or a comma list such as ``"0,1,4"``."""
    try:
        if ".." in text:
            lo, hi = text.split("..")
            vals = list(range(int(lo), int(hi) + 1))
        else:
            vals = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"cannot parse history lengths {text!r}") from None
    if not vals or min(vals) < 0:
        raise ConfigError(f"history lengths must be a non-empty set of values >= 0, got {text!r}")
    return vals


# -- configuration ----------------------------------------------------------------------

def load_config(path: str | None) -> dict:
    """Read a run configuration document (JSON, same layout as the scene files).

    Recognised sections: ``encoder`` (field overrides, optionally with a
    ``preset`` key), ``train``, ``render`` and ``data``.
    """
    doc = {}
    if path is not None:
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid config document ({exc})") from None
        if doc.get("format", CONFIG_FORMAT) != CONFIG_FORMAT:
            raise ConfigError(f"{path}: not a run configuration")
    unknown = set(doc) - {"format", "version", "encoder", "train", "render", "data"}
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    return doc


def encoder_config(doc: dict) -> EncoderConfig:
    section = dict(doc.get("encoder", {}))
    preset = section.pop("preset", "desk")
    if preset not in PRESETS:
        raise ConfigError(f"unknown encoder preset {preset!r}; choose from {sorted(PRESETS)}")
    base = PRESETS[preset]().to_dict()
    base.update(section)
    return EncoderConfig.from_dict(base)


def render_config(doc: dict) -> RenderConfig:
    section = doc.get("render", {})
    extra = set(section) - set(RenderConfig.__dataclass_fields__)
    if extra:
        raise ConfigError(f"unknown render keys: {sorted(extra)}")
    return RenderConfig(**section)


def make_scenes(kind: str, n: int, n_frames: int, seed: int):
    if n < 1 or n_frames < 1:
        raise ConfigError("scene and frame counts must be positive")
    if kind == "occlusion":
        return [occlusion_world(seed + i, n_frames=n_frames) for i in range(n)]
    if kind == "training":
        return occlusion_training_set(seed, n, n_frames=n_frames)
    if kind == "benchmark":
        return occlusion_benchmark(seed, n_scenes=n, n_frames=n_frames)
    if kind == "random":
        return [random_world(seed + i, n_frames=n_frames) for i in range(n)]
    raise ConfigError(f"unknown scene kind {kind!r}")


def _dataset(args, doc) -> SceneDataset:
    render = render_config(doc)
    if args.scenes:
        return SceneDataset(load_scenes(args.scenes), render)
    data = {**DEFAULT_DATA, **doc.get("data", {})}
    return SceneDataset(make_scenes(data["kind"], data["n_scenes"], data["n_frames"], data["seed"]), render)


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# -- commands -------------------------------------------------------------------------------

def cmd_gen_scenes(args, doc) -> int:
    seed = args.seed if args.seed is not None else DEFAULT_DATA["seed"]
    specs = make_scenes(args.kind, args.n, args.frames, seed)
    path = _out(args) / "scenes.json"
    save_scenes(path, specs)
    print(f"wrote {len(specs)} scenes to {path}")
    return 0


def cmd_train(args, doc) -> int:
    enc = encoder_config(doc)
    tdict = {**TrainConfig().to_dict(), **doc.get("train", {})}
    if args.seed is not None:
        tdict["seed"] = args.seed
    if args.steps is not None:
        tdict["steps"] = args.steps
    if args.m_train is not None:
        tdict["m_train"] = args.m_train
    tcfg = TrainConfig.from_dict(tdict)
    dataset = _dataset(args, doc)
    model = OccupancyModel(enc, task=tcfg.task, seed=tcfg.seed)
    log.info("training %d params for %d steps on %d scenes", model.param_count(), tcfg.steps, len(dataset))
    result = train(model, dataset, tcfg, log_every=args.log_every)
    out = _out(args)
    model.save(out / "model.ckpt")
    result.write_csv(out / "loss.csv")
    save_config(out / "config.json", {"format": CONFIG_FORMAT, "version": 1, "encoder": enc.to_dict(),
                                      "train": tcfg.to_dict(), "render": asdict(dataset.render)})
    print(f"final loss {result.losses[-1]:.4f}; checkpoint {out / 'model.ckpt'}")
    return 0


def cmd_eval(args, doc) -> int:
    model = OccupancyModel.load(args.checkpoint)
    dataset = _dataset(args, doc)
    out = _out(args)
    report = evaluate(model, dataset, args.m, score_empty=args.score_empty)
    report.write(out / "report")
    print(f"mIoU {100 * report.miou:.2f}")
    if args.baseline:
        base_model = OccupancyModel.load(args.baseline)
        base = evaluate(base_model, dataset, args.baseline_m, score_empty=args.score_empty)
        base.write(out / "baseline")
        write_gain_csv(out / "gain_vs_count.csv", gain_vs_count(base, report))
        print(f"baseline mIoU {100 * base.miou:.2f}; gain {100 * (report.miou - base.miou):+.2f}")
    return 0


def cmd_ablate(args, doc) -> int:
    model = OccupancyModel.load(args.checkpoint)
    dataset = _dataset(args, doc)
    rows = ablate_temporal_range(model, dataset, parse_m_values(args.m), score_empty=args.score_empty)
    path = _out(args) / "ablation.csv"
    write_ablation_csv(path, rows)
    for m, rep in rows:
        print(f"M={m}: mIoU {100 * rep.miou:.2f}")
    return 0


def cmd_viz(args, doc) -> int:
    model = OccupancyModel.load(args.checkpoint)
    dataset = _dataset(args, doc)
    if not 0 <= args.scene < len(dataset):
        raise ConfigError(f"scene index {args.scene} outside [0, {len(dataset)})")
    m = model.cfg.temporal_steps if args.m is None else args.m
    t = len(dataset.specs[args.scene]) - 1
    frames = dataset.history(args.scene, t, m, strict=True)
    tpv = model.encode(frames, m)
    out = _out(args)
    for plane in ("hw", "dh", "wd"):
        emit_heatmap(tpv[plane].data, out / f"tpv_{plane}.pgm")
    k = model.n_semantic + 1
    write_prediction(out / "prediction.bin", model.voxel_logits(tpv).data.argmax(axis=-1), k)
    labels, _ = frame_targets(frames[-1], model.cfg.grid, model.n_semantic)
    write_prediction(out / "ground_truth.bin", labels, k)
    print(f"wrote heatmaps and label dumps to {out}")
    return 0


def cmd_selftest(args, doc) -> int:
    results = run_selftest()
    for r in results:
        print(f"{'PASS' if r.ok else 'FAIL'} {r.name}: error {r.error:.3g} (tol {r.tolerance:g}, {r.seconds:.2f}s)")
    return 0 if all(r.ok for r in results) else 1


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="s2tpv", description="TPV occupancy encoder: synthetic data, training and evaluation.")
    p.add_argument("--config", help="run configuration document (JSON)")
    p.add_argument("--seed", type=int, help="seed for scene generation / model init and training")
    p.add_argument("--out", default="out", help="output directory (default: ./out)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-scenes", help="write a scene file")
    g.add_argument("--kind", choices=["occlusion", "training", "benchmark", "random"], default="occlusion")
    g.add_argument("--n", type=int, default=20, help="number of scenes")
    g.add_argument("--frames", type=int, default=9, help="frames per scene")
    g.set_defaults(fn=cmd_gen_scenes)

    t = sub.add_parser("train", help="train a model; writes model.ckpt, model.json, loss.csv")
    t.add_argument("--scenes", help="scene file (default: generate from the config's data section)")
    t.add_argument("--steps", type=int)
    t.add_argument("--m-train", type=int, dest="m_train")
    t.add_argument("--log-every", type=int, default=0)
    t.set_defaults(fn=cmd_train)

    for name, fn, helptext in (("eval", cmd_eval, "score a checkpoint"),
                               ("ablate", cmd_ablate, "inference-time history-length sweep"),
                               ("viz", cmd_viz, "plane heatmaps and prediction dumps")):
        s = sub.add_parser(name, help=helptext)
        s.add_argument("--checkpoint", required=True)
        s.add_argument("--scenes", help="scene file (default: generate from the config's data section)")
        if name == "ablate":
            s.add_argument("--m", default="0..7", help='history lengths, "0..7" or "0,1,2"')
        else:
            s.add_argument("--m", type=int, help="history length at inference (default: the model's)")
        if name != "viz":
            s.add_argument("--score-empty", action="store_true",
                           help="score every cell and include empty in the mean")
        if name == "eval":
            s.add_argument("--baseline", help="second checkpoint to compare against")
            s.add_argument("--baseline-m", type=int, dest="baseline_m")
        if name == "viz":
            s.add_argument("--scene", type=int, default=0)
        s.set_defaults(fn=fn)

    st = sub.add_parser("selftest", help="run the built-in oracle checks")
    st.set_defaults(fn=cmd_selftest)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        doc = load_config(args.config)
        return args.fn(args, doc)
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 2
    except (S2TPVError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
