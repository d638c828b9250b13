"""Command line: gen-data, train, sample, eval, flops.

Exit status is 0 on success, 2 on a usage error and 1 when the run itself
fails (missing or corrupt files, for instance).
"""
from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

import numpy as np

from . import io as dio
from .data import SHAPES, DatasetSpec, generate
from .diffusion import SamplerConfig, make_schedule, sample
from .metrics import evaluate
from .model import CUSTOM, SIZES, DiMConfig, init_params, named_parameters
from .optim import Adam
from .profiler import scaling_report
from .training import make_optimizer, predictor, train
from .voxel import PointCloud, normalize_dataset


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=0, help="master random seed")
    p.add_argument("--config", help="key=value file; '#' comments, later keys win; flags override it")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--no-plot", action="store_true", help="skip the PNG figures")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="dim3d", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="write a synthetic shape dataset")
    _common(g)
    g.add_argument("--classes", default=",".join(SHAPES), help="comma-separated shape names")
    g.add_argument("--clouds-per-class", type=int, default=2)
    g.add_argument("--points", type=int, default=128)
    g.add_argument("--jitter", type=float, default=0.0)
    g.add_argument("--text", action="store_true", help="write 'x y z' text files instead of PCB1")

    t = sub.add_parser("train", help="fit the noise-prediction network")
    _common(t)
    t.add_argument("--data", required=True)
    t.add_argument("--model-size", choices=sorted(SIZES))
    t.add_argument("--layers", type=int, help="custom depth (needs --hidden, excludes --model-size)")
    t.add_argument("--hidden", type=int, help="custom width")
    t.add_argument("--patch", type=int, choices=(2, 4, 8), default=4)
    t.add_argument("--voxel", type=int, default=32)
    t.add_argument("--steps", type=int, default=2000)
    t.add_argument("--batch", type=int, default=8)
    t.add_argument("--lr", type=float, default=1e-4)
    t.add_argument("--p-uncond", type=float, default=0.1)
    t.add_argument("--timesteps", type=int, default=1000)
    t.add_argument("--ckpt-every", type=int, default=0, help="0 keeps only the final checkpoint")
    t.add_argument("--resume", help="continue from this checkpoint")

    s = sub.add_parser("sample", help="draw point clouds from a checkpoint")
    _common(s)
    s.add_argument("--ckpt", required=True)
    s.add_argument("--num", type=int, default=4)
    s.add_argument("--class", dest="cls", type=int, help="class id; omit for unconditional")
    s.add_argument("--guidance", type=float, default=1.5)
    s.add_argument("--points", type=int, help="points per cloud (default: as trained)")
    s.add_argument("--clip-denoised", action=argparse.BooleanOptionalAction, default=True,
                   help="clip the predicted clean cloud to [-1, 1] at every step (default on)")

    e = sub.add_parser("eval", help="1-NNA / COV between two directories of clouds")
    _common(e)
    e.add_argument("--gen-dir", required=True)
    e.add_argument("--ref-dir", required=True)
    e.add_argument("--metric", choices=("cd", "emd", "both"), default="both")

    f = sub.add_parser("flops", help="analytic FLOPs of DiM against attention")
    _common(f)
    f.add_argument("--model-size", choices=sorted(SIZES), default="XL")
    f.add_argument("--patch", type=int, choices=(2, 4, 8), default=2)
    f.add_argument("--voxel", type=int, nargs="+", default=[32])
    return ap


def parse_args(argv: list[str]) -> argparse.Namespace:
    """Values from --config become subcommand defaults, so explicit flags still win."""
    ap = build_parser()
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("command", nargs="?")
    pre.add_argument("--config")
    early, _ = pre.parse_known_args(argv)
    subs = ap._subparsers._group_actions[0].choices
    if early.config and early.command in subs:
        try:
            cfg = dio.parse_config(Path(early.config).read_text())
        except OSError as e:
            raise UsageError(f"--config: cannot read {early.config}: {e.strerror}")
        except ValueError as e:
            raise UsageError(f"--config: {e}")
        sub = subs[early.command]
        known = {a.dest: a for a in sub._actions}
        defaults = {}
        for k, v in cfg.items():
            dest = k.replace("-", "_")
            dest = "cls" if dest == "class" else dest
            if dest not in known or dest in ("config", "help"):
                raise UsageError(f"--config: unknown key {k!r} for {early.command}")
            act = known[dest]
            try:
                if act.nargs == "+":
                    defaults[dest] = [act.type(x) for x in v.split()]
                elif isinstance(act, (argparse._StoreTrueAction, argparse.BooleanOptionalAction)):
                    defaults[dest] = v.lower() in ("1", "true", "yes")
                elif act.type is not None:
                    defaults[dest] = act.type(v)
                else:
                    defaults[dest] = v
            except ValueError:
                raise UsageError(f"--config: bad value {v!r} for {k}")
            if act.choices is not None and any(
                    x not in act.choices for x in np.atleast_1d(defaults[dest]).tolist()):
                raise UsageError(f"--config: {k} must be one of {sorted(act.choices)}")
            act.required = False
        sub.set_defaults(**defaults)
    return ap.parse_args(argv)


# -- training state <-> checkpoint ------------------------------------------

def _model_config(args) -> DiMConfig:
    if args.model_size and (args.layers is not None or args.hidden is not None):
        raise UsageError("--model-size conflicts with --layers/--hidden")
    if (args.layers is None) != (args.hidden is None):
        raise UsageError("--layers and --hidden go together")
    try:
        if args.model_size:
            return DiMConfig.from_size(args.model_size, patch=args.patch, voxel=args.voxel)
        layers, hidden = (args.layers, args.hidden) if args.layers else SIZES["S"]
        return DiMConfig(layers=layers, hidden=hidden, patch=args.patch, voxel=args.voxel)
    except ValueError as e:
        raise UsageError(f"--patch/--voxel: {e}")


def save_state(path, cfg: DiMConfig, extra: dict, params, opt: Adam, mean, scale) -> None:
    config = {"layers": cfg.layers, "hidden": cfg.hidden, "patch": cfg.patch, "voxel": cfg.voxel,
              "state_size": cfg.state_size, "expand": cfg.expand, "conv_width": cfg.conv_width,
              "num_classes": cfg.num_classes, "size_tag": cfg.size_tag, "step": opt.step_count, **extra}
    tensors = [("norm.mean", mean), ("norm.scale", np.array([scale]))]
    for name, t in named_parameters(params):
        tensors += [("param." + name, t.data), ("adam.m." + name, opt.m[name]), ("adam.v." + name, opt.v[name])]
    dio.save_checkpoint(path, config, tensors)


def load_state(path):
    config, tensors = dio.load_checkpoint(path)
    ints = ("layers", "hidden", "patch", "voxel", "state_size", "expand", "conv_width", "num_classes")
    try:
        cfg = DiMConfig(**{k: int(config[k]) for k in ints}, size_tag=config.get("size_tag", CUSTOM))
    except KeyError as e:
        raise dio.FormatError(path, f"config block lacks {e}")
    params = init_params(cfg, 0)
    for name, t in named_parameters(params):
        key = "param." + name
        if key not in tensors or tensors[key].shape != t.data.shape:
            raise dio.FormatError(path, f"missing or misshapen tensor {key}")
        t.data[...] = tensors[key]
    opt = make_optimizer(params, float(config.get("lr", 1e-4)))
    for name, _ in opt.named:
        opt.m[name][...] = tensors.get("adam.m." + name, 0.0)
        opt.v[name][...] = tensors.get("adam.v." + name, 0.0)
    opt.step_count = int(config["step"])
    return cfg, config, params, opt, tensors["norm.mean"], float(tensors["norm.scale"][0])


# -- subcommands ------------------------------------------------------------

def cmd_gen_data(args) -> None:
    classes = [c.strip() for c in args.classes.split(",") if c.strip()]
    try:
        spec = DatasetSpec(classes=classes, clouds_per_class=args.clouds_per_class,
                           points_per_cloud=args.points, jitter=args.jitter, seed=args.seed)
    except ValueError as e:
        raise UsageError(f"--classes/--points: {e}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for stem, cid, pts in generate(spec):
        name = stem + (".txt" if args.text else ".pcb")
        (dio.write_cloud_text if args.text else dio.write_cloud)(out / name, pts)
        rows.append((name, cid))
    dio.write_manifest(out, rows)
    print(f"wrote {len(rows)} clouds to {out}")


def cmd_train(args) -> None:
    if args.steps < 0 or args.batch < 1 or args.lr <= 0 or args.timesteps < 1:
        raise UsageError("--steps, --batch, --lr and --timesteps must be positive")
    if not 0 <= args.p_uncond < 1:
        raise UsageError("--p-uncond must be in [0, 1)")
    cfg = None if args.resume else _model_config(args)   # flag errors before any file is read
    clouds, labels = dio.read_dataset(args.data)
    sizes = {c.shape[0] for c in clouds}
    if len(sizes) != 1:
        raise ValueError(f"training clouds must share a point count, found {sorted(sizes)}")
    normed, mean, scale = normalize_dataset([PointCloud(c, y) for c, y in zip(clouds, labels)])
    pts = np.stack([c.points for c in normed])
    labels = np.asarray(labels)
    extra = {"lr": repr(args.lr), "timesteps": args.timesteps, "points": pts.shape[1],
             "seed": args.seed, "p_uncond": repr(args.p_uncond), "batch": args.batch}
    if args.resume:
        cfg, saved, params, opt, mean, scale = load_state(args.resume)
        opt.lr = args.lr
        args.timesteps = int(saved.get("timesteps", args.timesteps))
        extra["timesteps"] = args.timesteps
    else:
        cfg.num_classes = max(1, int(labels.max()) + 1)
        params = init_params(cfg, args.seed)
        opt = make_optimizer(params, args.lr)
    sched = make_schedule(args.timesteps)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    start = opt.step_count
    log = open(out / "loss.csv", "a" if args.resume else "w", newline="")
    w = csv.writer(log, lineterminator="\n")
    if not args.resume:
        w.writerow(["step", "loss"])

    def on_step(s: int, loss: float) -> None:
        w.writerow([s + 1, repr(loss)])
        if args.ckpt_every and (s + 1) % args.ckpt_every == 0:
            save_state(out / f"ckpt_{s + 1:06d}.ckpt", cfg, extra, params, opt, mean, scale)

    with log:
        losses = train(params, cfg, pts, labels, sched, opt, args.steps, args.batch, args.seed,
                       p_uncond=args.p_uncond, start_step=start, on_step=on_step)
    save_state(out / "final.ckpt", cfg, extra, params, opt, mean, scale)
    if not args.no_plot and losses:
        from . import plotting
        with open(out / "loss.csv", newline="") as f:
            all_losses = [float(r["loss"]) for r in csv.DictReader(f)]
        plotting.loss_curve(all_losses, out / "loss.png")
    tail = np.mean(losses[-50:]) if losses else float("nan")
    print(f"trained {args.steps} steps; mean loss over last {min(50, len(losses))}: {tail:.6f}")


def cmd_sample(args) -> None:
    if args.num < 1:
        raise UsageError("--num must be at least 1")
    if args.guidance < 0:
        raise UsageError("--guidance must be non-negative")
    cfg, saved, params, _, mean, scale = load_state(args.ckpt)
    if args.cls is not None and not 0 <= args.cls < cfg.num_classes:
        raise UsageError(f"--class must be in [0, {cfg.num_classes})")
    n_points = args.points or int(saved.get("points", 128))
    sched = make_schedule(int(saved.get("timesteps", 1000)))
    clouds = sample(predictor(params, cfg, sched.T), args.num, n_points, args.cls, sched,
                    SamplerConfig(guidance=args.guidance, seed=args.seed,
                                  clip_denoised=args.clip_denoised), mean, scale)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for k, c in enumerate(clouds):
        dio.write_cloud(out / f"sample_{k:04d}.pcb", c.points)
    if not args.no_plot:
        from . import plotting
        plotting.clouds([c.points for c in clouds], out / "samples.png",
                        [f"sample {k}" for k in range(len(clouds))])
    print(f"wrote {len(clouds)} samples to {out}")


def cmd_eval(args) -> None:
    gen = dio.read_cloud_dir(args.gen_dir)
    ref = dio.read_cloud_dir(args.ref_dir)
    report = evaluate(gen, ref, args.metric)
    sys.stdout.write(report.to_text())
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.csv").write_text(report.csv_header() + report.csv_row())
    if not args.no_plot:
        from . import plotting
        plotting.metrics_bars(report.fields(), out / "metrics.png")


def cmd_flops(args) -> None:
    try:
        for v in args.voxel:
            if v < 1:
                raise ValueError(f"voxel size {v} must be positive")
            cfg = DiMConfig.from_size(args.model_size, patch=args.patch, voxel=v)
    except ValueError as e:
        raise UsageError(f"--patch/--voxel: {e}")
    text = scaling_report([(f"{args.model_size}/{args.patch}", cfg)], list(args.voxel))
    sys.stdout.write(text)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "flops.csv").write_text(text)
    if not args.no_plot:
        from . import plotting
        rows = list(csv.DictReader(text.splitlines()))
        plotting.flops_scaling(rows, out / "flops.png")


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "sample": cmd_sample,
            "eval": cmd_eval, "flops": cmd_flops}


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    try:
        args = parse_args(argv)
        COMMANDS[args.command](args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 2
    except (OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
