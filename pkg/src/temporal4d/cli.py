"""Command-line entry points.

``temporal4d <subcommand> [options]`` with subcommands check, eval, track,
demo-train, generate and normalize.  Options resolve as: explicit flags, then
the JSON file given by ``--config``, then built-in defaults.  The resolved
values are written to ``config.json`` in the output directory.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

logger = logging.getLogger("temporal4d")

DEFAULTS = {
    "common": {"seed": 0, "out": None},
    "check": {"only": None},
    "eval": {"n_points": 4096, "tau": 0.02, "K": 32, "eps": 1e-8},
    "track": {"focal": 150.0, "cx": None, "cy": None, "steps": 500, "lr": 0.02,
              "focal_lr": 0.01, "sigma": 1.5, "samples": 2048},
    "demo-train": {"steps": 2000, "lr": 3e-3, "batch": 32, "w_self": 2, "w_cross": 2,
                   "stride": 2, "frames": 96, "clip_len": 48, "hop": 24,
                   "dataset_seeds": [0, 1, 2, 3], "sample_steps": 16, "gen_frames": 96,
                   "cond_seed": 100},
    "generate": {"frames": 500, "W": None, "w_cross": None, "sample_steps": 16,
                 "cond_seed": 100, "mode": "stream"},
    "normalize": {"rest_frame": 0, "center": "bbox"},
}


class UsageError(Exception):
    pass


def _build_parser() -> argparse.ArgumentParser:
    S = argparse.SUPPRESS
    common = argparse.ArgumentParser(add_help=False, argument_default=S)
    common.add_argument("--seed", type=int, help="random seed (default 0)")
    common.add_argument("--out", help="output directory")
    common.add_argument("--config", help="JSON file of option values")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="temporal4d", description=__doc__.split("\n")[0])
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("check", parents=[common], argument_default=S,
                       help="run the invariant suite")
    c.add_argument("--only", nargs="+", help="run only these property names")

    e = sub.add_parser("eval", parents=[common], argument_default=S,
                       help="compare predicted and ground-truth OBJ sequences")
    e.add_argument("pred_dir")
    e.add_argument("gt_dir")
    e.add_argument("--n-points", dest="n_points", type=int)
    e.add_argument("--tau", type=float)
    e.add_argument("--K", type=int)
    e.add_argument("--eps", type=float)

    t = sub.add_parser("track", parents=[common], argument_default=S,
                       help="recover per-frame translations from masks")
    t.add_argument("mesh_dir")
    t.add_argument("mask_dir")
    t.add_argument("--focal", type=float)
    t.add_argument("--cx", type=float)
    t.add_argument("--cy", type=float)
    t.add_argument("--steps", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--focal-lr", dest="focal_lr", type=float)
    t.add_argument("--sigma", type=float)
    t.add_argument("--samples", type=int)

    d = sub.add_parser("demo-train", parents=[common], argument_default=S,
                       help="train the toy model on synthetic sequences and sample")
    d.add_argument("--steps", type=int)
    d.add_argument("--lr", type=float)
    d.add_argument("--batch", type=int)
    d.add_argument("--w-self", dest="w_self", type=int)
    d.add_argument("--w-cross", dest="w_cross", type=int)
    d.add_argument("--stride", type=int)
    d.add_argument("--frames", type=int)
    d.add_argument("--clip-len", dest="clip_len", type=int)
    d.add_argument("--hop", type=int)
    d.add_argument("--sample-steps", dest="sample_steps", type=int)
    d.add_argument("--gen-frames", dest="gen_frames", type=int)
    d.add_argument("--cond-seed", dest="cond_seed", type=int)

    g = sub.add_parser("generate", parents=[common], argument_default=S,
                       help="sample a sequence from a checkpoint")
    g.add_argument("checkpoint")
    g.add_argument("--frames", "-T", dest="frames", type=int)
    g.add_argument("--W", type=int, help="self-attention half-width (default: trained)")
    g.add_argument("--w-cross", dest="w_cross", type=int)
    g.add_argument("--sample-steps", dest="sample_steps", type=int)
    g.add_argument("--cond-seed", dest="cond_seed", type=int)
    g.add_argument("--mode", choices=["stream", "batch"])

    n = sub.add_parser("normalize", parents=[common], argument_default=S,
                       help="normalize an OBJ sequence into [-1, 1]^3")
    n.add_argument("in_dir")
    n.add_argument("--rest-frame", dest="rest_frame", type=int)
    n.add_argument("--center", choices=["bbox", "centroid"])
    return p


def resolve(args: argparse.Namespace) -> dict:
    """Merge defaults, the optional config file and explicit flags."""
    cfg = dict(DEFAULTS["common"])
    cfg.update(DEFAULTS[args.command])
    given = vars(args).copy()
    path = given.pop("config", None)
    if path is not None:
        try:
            from_file = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise UsageError(f"cannot read config {path}: {e}") from e
        if not isinstance(from_file, dict):
            raise UsageError("config file must hold a JSON object")
        unknown = set(from_file) - set(cfg) - {"command"}
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        cfg.update({k: v for k, v in from_file.items() if k != "command"})
    given.pop("verbose", None)
    cfg.update(given)
    return cfg


def _out_dir(cfg, default: str) -> Path:
    out = Path(cfg["out"] or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _persist(cfg: dict, out: Path):
    (out / "config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True, default=str) + "\n")


def _need_dir(path, what):
    if not Path(path).is_dir():
        raise UsageError(f"{what} {path} is not a directory")


# ---------------------------------------------------------------------------
# subcommands


def cmd_check(cfg) -> int:
    from .checks import run_checks

    only = set(cfg["only"]) if cfg["only"] else None
    results = run_checks(cfg["seed"], only)
    lines = [r.line() for r in results]
    failed = [r.name for r in results if not r.passed]
    lines.append(f"{len(results) - len(failed)}/{len(results)} properties passed")
    if failed:
        lines.append("failed: " + ", ".join(failed))
    text = "\n".join(lines) + "\n"
    sys.stdout.write(text)
    if cfg["out"]:
        out = _out_dir(cfg, ".")
        (out / "check.log").write_text(text)
        _persist(cfg, out)
    return 1 if failed else 0


def cmd_eval(cfg) -> int:
    from .meshio import load_sequence
    from .metrics import evaluate_sequences

    _need_dir(cfg["pred_dir"], "prediction directory")
    _need_dir(cfg["gt_dir"], "ground-truth directory")
    pred = load_sequence(cfg["pred_dir"])
    gt = load_sequence(cfg["gt_dir"])
    if len(pred) != len(gt):
        raise RuntimeError(f"sequence lengths differ: {len(pred)} predicted vs {len(gt)} ground truth")
    report = evaluate_sequences(pred, gt, n=cfg["n_points"], tau=cfg["tau"], K=cfg["K"],
                                eps=cfg["eps"], seed=cfg["seed"])
    out = _out_dir(cfg, "eval_out")
    (out / "report.json").write_text(report.to_json() + "\n")
    _persist(cfg, out)
    print(report.table())
    print(f"tau={cfg['tau']:g} K={cfg['K']} eps={cfg['eps']:g} points={cfg['n_points']}")
    return 0


def cmd_track(cfg) -> int:
    from .meshio import load_sequence
    from .trajectory import CameraParams, read_mask_dir, optimize_trajectory

    _need_dir(cfg["mesh_dir"], "mesh directory")
    _need_dir(cfg["mask_dir"], "mask directory")
    seq = load_sequence(cfg["mesh_dir"])
    masks = read_mask_dir(cfg["mask_dir"])
    if len(masks) != len(seq):
        missing = list(range(len(masks), len(seq)))
        raise RuntimeError(f"{len(seq)} meshes but {len(masks)} masks; frames without a mask: {missing}")
    H, W = masks[0].shape
    cam = CameraParams(cfg["focal"], W / 2.0 if cfg["cx"] is None else cfg["cx"],
                       H / 2.0 if cfg["cy"] is None else cfg["cy"], H, W)
    traj = optimize_trajectory(seq, np.stack(masks), cam, steps=cfg["steps"], lr=cfg["lr"],
                               sigma=cfg["sigma"], samples=cfg["samples"], seed=cfg["seed"],
                               focal_lr=cfg["focal_lr"])
    out = _out_dir(cfg, "track_out")
    traj.save(out / "trajectory.json")
    _persist(cfg, out)
    dice = traj.dice[~np.isnan(traj.dice)]
    print(f"frames {len(seq)}  mean dice {dice.mean():.4f}  focal {traj.focal:.3f}")
    return 0


def _model_config(cfg):
    from .flowmatch import ToyDiTConfig
    from .swattn import WindowSpec

    return ToyDiTConfig(window=WindowSpec(cfg["w_self"], cfg["w_cross"], cfg["stride"]))


def _generate(model, frames, W, w_cross, sample_steps, cond_seed, seed, mode):
    from .flowmatch import Codec, euler_sample, synth_sequence
    from .flowmatch.synth import decode_latents

    codec = Codec(model.config.tokens, model.config.width, model.config.cond_tokens)
    _, cond, _ = synth_sequence(cond_seed, frames, codec=codec)
    latents = euler_sample(model, cond, sample_steps, W, seed, mode=mode, w_cross=w_cross)
    return latents, decode_latents(latents, codec), model.last_stream_peak


def cmd_demo_train(cfg) -> int:
    from .flowmatch import save_checkpoint, train_demo, write_loss_csv
    from .meshio import save_sequence

    mc = _model_config(cfg)
    result = train_demo(mc, cfg["dataset_seeds"], cfg["steps"], cfg["lr"], frames=cfg["frames"],
                        clip_len=cfg["clip_len"], hop=cfg["hop"], batch=cfg["batch"],
                        seed=cfg["seed"])
    out = _out_dir(cfg, "demo_out")
    save_checkpoint(result.model, out / "checkpoint.npz")
    write_loss_csv(result.losses, out / "loss.csv")
    _, seq, _ = _generate(result.model, cfg["gen_frames"], cfg["w_self"], cfg["w_cross"],
                          cfg["sample_steps"], cfg["cond_seed"], cfg["seed"], "batch")
    save_sequence(seq, out / "generated")
    _persist(cfg, out)
    sm = result.smoothed()
    if len(sm):
        print(f"steps {len(result.losses)}  smoothed loss {sm[0]:.4f} -> {sm[-1]:.4f}")
    return 0


def cmd_generate(cfg) -> int:
    from .flowmatch import load_checkpoint
    from .meshio import save_sequence

    if not Path(cfg["checkpoint"]).is_file():
        raise UsageError(f"checkpoint {cfg['checkpoint']} not found")
    model = load_checkpoint(cfg["checkpoint"])
    W = model.config.window.w_self if cfg["W"] is None else cfg["W"]
    wc = model.config.window.w_cross if cfg["w_cross"] is None else cfg["w_cross"]
    latents, seq, peak = _generate(model, cfg["frames"], W, wc, cfg["sample_steps"],
                                   cfg["cond_seed"], cfg["seed"], cfg["mode"])
    out = _out_dir(cfg, "generate_out")
    save_sequence(seq, out / "sequence")
    np.save(out / "latents.npy", latents)
    stats = {"frames": cfg["frames"], "W": W, "w_cross": wc, "mode": cfg["mode"],
             "peak_cached_frames": int(peak), "cache_bound": 2 * max(W, wc) + 1}
    (out / "stats.json").write_text(json.dumps(stats, indent=2, sort_keys=True) + "\n")
    _persist(cfg, out)
    print(f"generated {cfg['frames']} frames; peak cached frames {peak}")
    return 0


def cmd_normalize(cfg) -> int:
    from .meshio import load_sequence, normalize_sequence, save_sequence

    _need_dir(cfg["in_dir"], "input directory")
    seq = load_sequence(cfg["in_dir"])
    norm, _ = normalize_sequence(seq, cfg["rest_frame"], cfg["center"])
    out = _out_dir(cfg, "normalized")
    save_sequence(norm, out)
    _persist(cfg, out)
    print(f"normalized {len(norm)} frames into {out}")
    return 0


COMMANDS = {
    "check": cmd_check,
    "eval": cmd_eval,
    "track": cmd_track,
    "demo-train": cmd_demo_train,
    "generate": cmd_generate,
    "normalize": cmd_normalize,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(name)s: %(message)s")
    try:
        cfg = resolve(args)
        cfg["command"] = args.command
        return COMMANDS[args.command](cfg)
    except UsageError as e:
        print(f"temporal4d {args.command}: error: {e}", file=sys.stderr)
        return 2
    except Exception as e:
        print(f"temporal4d {args.command}: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
