"""Command-line entry points.

    phystrack gen-data --preset toy --seed 0 --out data/
    phystrack pretrain-refiner --data data/ --out refiner.npz
    phystrack train --data data/ --init refiner.npz --out run/
    phystrack eval --data data/ --checkpoint run/final.npz
    phystrack ablate-refine --data data/ --checkpoint run/final.npz
    phystrack rollout --data data/ --checkpoint run/final.npz --sequence 0 --out sim.json
"""
from __future__ import annotations

import argparse
import json
import sys
import traceback
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import pipeline as P
from .config import RunConfig, load_config
from .data import load_motion, save_motion
from .errors import InvalidInputError, ParseError, SimulationDivergedError
from .metrics import evaluate, sweep_table
from .policy import load_checkpoint, save_checkpoint
from .presets import PRESET_NAMES
from .rl import train

DATASET_FORMAT = "phystrack-dataset"
DATASET_VERSION = 1


class CLIError(Exception):
    pass


def _write_text(path, text: str) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)


def _run_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.preset is not None:
        cfg.preset = args.preset
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


# -- datasets -----------------------------------------------------------------


def write_dataset(out, preset, pairs, cfg: RunConfig) -> None:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    entries = [{"gt": f"gt_{i:03d}.json", "est": f"est_{i:03d}.json"} for i in range(len(pairs))]

    def _save(i):
        save_motion(out / entries[i]["gt"], pairs[i][0])
        save_motion(out / entries[i]["est"], pairs[i][1])

    with ThreadPoolExecutor() as ex:
        list(ex.map(_save, range(len(pairs))))
    manifest = {"format": DATASET_FORMAT, "version": DATASET_VERSION, "preset": preset.name, "seed": cfg.seed,
                "config": cfg.to_dict(), "sequences": entries}
    _write_text(out / "manifest.json", json.dumps(manifest, indent=1))


def read_dataset(path, preset):
    path = Path(path)
    mpath = path / "manifest.json"
    try:
        manifest = json.loads(mpath.read_text())
    except OSError as exc:
        raise ParseError(f"cannot read dataset manifest: {exc.strerror}", mpath) from exc
    except json.JSONDecodeError as exc:
        raise ParseError(exc.msg, mpath, line=exc.lineno) from exc
    if manifest.get("format") != DATASET_FORMAT:
        raise ParseError("not a dataset manifest", mpath, "format")
    if manifest.get("version") != DATASET_VERSION:
        raise ParseError(f"unsupported dataset version {manifest.get('version')!r}", mpath, "version")
    if manifest.get("preset") != preset.name:
        raise CLIError(f"dataset was generated for preset {manifest.get('preset')!r}, not {preset.name!r}")
    pairs = []
    for e in manifest["sequences"]:
        gt, est = load_motion(path / e["gt"]), load_motion(path / e["est"])
        if gt.skeleton.to_dict() != preset.skeleton.to_dict():
            raise CLIError(f"{e['gt']}: skeleton does not match preset {preset.name!r}")
        pairs.append((gt, est))
    return pairs


def _clips(args, cfg: RunConfig, preset):
    pairs = read_dataset(args.data, preset) if args.data else P.make_pairs(preset, cfg.seed)
    return P.make_clips(preset, pairs)


def _select(clips, which):
    if which is None:
        return clips
    bad = [i for i in which if not 0 <= i < len(clips)]
    if bad:
        raise CLIError(f"sequence index {bad[0]} out of range (dataset has {len(clips)})")
    return [clips[i] for i in which]


def _load_policy(path, preset):
    policy, _, _ = load_checkpoint(path)
    if policy.skeleton.to_dict() != preset.skeleton.to_dict():
        raise CLIError(f"checkpoint {path} was trained on a different skeleton than preset {preset.name!r}")
    return policy


# -- subcommands --------------------------------------------------------------


def cmd_gen_data(args) -> int:
    cfg = _run_config(args)
    preset = cfg.build_preset()
    pairs = P.make_pairs(preset, cfg.seed, args.num_sequences, args.duration)
    write_dataset(args.out, preset, pairs, cfg)
    print(f"wrote {len(pairs)} sequence pairs ({len(pairs[0][0])} frames each) to {args.out}")
    return 0


def cmd_pretrain(args) -> int:
    cfg = _run_config(args)
    preset = cfg.build_preset()
    clips = _clips(args, cfg, preset)
    policy = P.make_policy(preset, cfg.seed)
    epochs = cfg.pretrain_epochs if args.epochs is None else args.epochs
    log = (lambda ep, loss: print(f"epoch {ep} loss {loss:.6g}")) if args.verbose else None
    before, after, _ = P.pretrain(policy, preset, clips, epochs, cfg.pretrain_lr, cfg.seed, log=log)
    save_checkpoint(args.out, policy, meta={"stage": "pretrain", "loss_before": before, "loss_after": after,
                                            "run_config": cfg.to_dict()})
    print(f"refiner loss {before:.6g} -> {after:.6g}; saved {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = _run_config(args)
    preset = cfg.build_preset()
    clips = _clips(args, cfg, preset)
    over = {} if args.epochs is None else {"epochs": args.epochs}
    ppo = P.ppo_config(preset, cfg.seed, **over)
    if args.init:
        policy = _load_policy(args.init, preset)
    else:
        policy = P.make_policy(preset, cfg.seed)
        if cfg.pretrain_epochs:
            P.pretrain(policy, preset, clips, cfg.pretrain_epochs, cfg.pretrain_lr, cfg.seed)
    env = P.make_env(preset, clips, ppo)
    progress = None
    if args.verbose:
        progress = lambda r: print(f"epoch {r['epoch']} reward {r['mean_reward']:.4f} len {r['episode_len']:.1f} "
                                   f"falls {r['fall_rate']:.3f}", flush=True)
    recs = train(policy, env, ppo, args.out, resume=args.resume, progress=progress)
    last = f"; last mean reward {recs[-1]['mean_reward']:.4f}" if recs else ""
    print(f"trained {len(recs)} epoch(s){last}; outputs in {args.out}")
    return 0


def cmd_eval(args) -> int:
    cfg = _run_config(args)
    preset = cfg.build_preset()
    lines = []
    if args.pred or args.gt:
        if not (args.pred and args.gt):
            raise CLIError("--pred and --gt must be given together")
        pred, gt = load_motion(args.pred), load_motion(args.gt)
        if len(pred) != len(gt) or pred.skeleton.to_dict() != gt.skeleton.to_dict():
            raise CLIError("predicted and ground-truth motions must share skeleton and length")
        Xp, Vp = P.sequence_positions(preset, [pred]) if pred.skeleton.to_dict() == preset.skeleton.to_dict() \
            else (pred.positions()[None], None)
        rep = evaluate(Xp[0], gt.positions(), None if Vp is None else Vp[0])
        lines.append(("motion", rep))
    else:
        if not args.checkpoint:
            raise CLIError("eval needs --checkpoint (or --pred/--gt)")
        policy = _load_policy(args.checkpoint, preset)
        clips = _select(_clips(args, cfg, preset), args.sequences)
        res = P.evaluate_policy(policy, preset, clips, deterministic=True)
        lines += [("simulated", res.sim), ("kinematic", res.kinematic), ("refined", res.refined)]
        print(f"mean reward {res.mean_reward:.4f}")
    text = "\n".join(r.to_json(n) for n, r in lines) + "\n"
    for n, r in lines:
        print(r.text(n))
    if args.out:
        _write_text(args.out, text)
    return 0


def cmd_ablate(args) -> int:
    cfg = _run_config(args)
    preset = cfg.build_preset()
    clips = _select(_clips(args, cfg, preset), args.sequences)
    policy = _load_policy(args.checkpoint, preset)
    rows = P.refinement_sweep(policy, preset, clips, range(args.max_iters + 1))
    print(sweep_table(rows))
    if args.out:
        _write_text(args.out, "".join(json.dumps(r, sort_keys=True) + "\n" for r in rows))
    return 0


def cmd_rollout(args) -> int:
    cfg = _run_config(args)
    preset = cfg.build_preset()
    clips = _select(_clips(args, cfg, preset), [args.sequence])
    policy = _load_policy(args.checkpoint, preset)
    rng = np.random.default_rng(cfg.seed)
    sims, rew = P.simulate(policy, preset, clips, deterministic=not args.stochastic, rng=rng)
    save_motion(args.out, sims[0])
    print(f"wrote {len(sims[0])} simulated frames to {args.out}; mean reward {rew.mean():.4f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="random seed (overrides the config)")
    common.add_argument("--config", help="run config JSON")
    common.add_argument("--preset", choices=PRESET_NAMES, default=None, help="character/task preset (default toy)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="phystrack", description="Physics-based tracking of noisy pose estimates.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("gen-data", parents=[common], help="generate reference motions and corrupted estimates")
    p.add_argument("--out", required=True)
    p.add_argument("--num-sequences", type=int, default=None)
    p.add_argument("--duration", type=float, default=None, help="seconds per sequence")
    p.set_defaults(func=cmd_gen_data)

    def data_arg(q):
        q.add_argument("--data", help="dataset directory from gen-data (default: generate from preset and seed)")

    p = sub.add_parser("pretrain-refiner", parents=[common], help="supervised pretraining of the refiner")
    data_arg(p)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=None)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train", parents=[common], help="PPO training")
    data_arg(p)
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--init", help="start from this checkpoint (e.g. a pretrained refiner)")
    p.add_argument("--resume", help="resume from a training checkpoint")
    p.add_argument("--epochs", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="evaluate a policy, or a motion file against ground truth")
    data_arg(p)
    p.add_argument("--checkpoint")
    p.add_argument("--pred", help="motion file to score")
    p.add_argument("--gt", help="ground-truth motion file")
    p.add_argument("--sequences", type=int, nargs="+", default=None)
    p.add_argument("--out", help="write metrics as JSON lines")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate-refine", parents=[common], help="error versus number of refinement iterations")
    data_arg(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--max-iters", type=int, default=5)
    p.add_argument("--sequences", type=int, nargs="+", default=None)
    p.add_argument("--out")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("rollout", parents=[common], help="simulate one sequence and save the motion")
    data_arg(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--sequence", type=int, default=0)
    p.add_argument("--stochastic", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_rollout)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits with usage and status 2 on bad input
    try:
        return args.func(args)
    except (CLIError, InvalidInputError, ParseError, SimulationDivergedError, FloatingPointError, OSError) as exc:
        print(f"phystrack {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # any other failure still exits nonzero
        if args.verbose:
            traceback.print_exc()
        print(f"phystrack {args.command}: internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
