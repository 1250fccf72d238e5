"""``seqvis`` command line.

Exit codes: 0 success, 2 configuration error, 3 bad input data, 4 runtime
failure.
"""

import argparse
import hashlib
import json
import logging
import os
import sys

import jsonschema

from . import config as cfgmod
from .envsim import generate_tasks, read_tasks, write_tasks
from .exceptions import CheckpointVersionError, ConfigError, GenerationError, ParseError, SeqvisError
from .experiment import (
    EVAL_STREAM,
    TRAIN_STREAM,
    dump_json,
    evaluate_checkpoint,
    load_or_generate,
    make_reasoner,
    run_experiment,
)
from .netpbm import read_pgm, write_ppm
from .parallel import limited_blas, max_threads
from .regions import RegionBank, build_region_bank
from .render import render_overlay
from .saliency import SaliencyMap, compute_saliency, grid_from_intensity, intensity_query
from .schemas import validate

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_RUNTIME = 0, 2, 3, 4

log = logging.getLogger("seqvis")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _load_cfg(args):
    return cfgmod.load_config(args.config, args.set or (), args.seed)


def _task_from_file(path, index):
    tasks = read_tasks(path)
    if not 0 <= index < len(tasks):
        raise ParseError(f"{path} holds {len(tasks)} tasks; index {index} is out of range")
    return tasks[index]


def _write_overlay(sal, bank, path, scale):
    pixels, legend = render_overlay(sal, bank, scale)
    write_ppm(path, pixels)
    legend["image"] = os.path.basename(path)
    validate(legend, "legend")
    dump_json(legend, os.path.splitext(path)[0] + ".legend.json")
    return legend


# -- subcommands ----------------------------------------------------------------

def cmd_gen_data(args):
    cfg = _load_cfg(args)
    n = cfg["data"]["n_train"] if args.n is None else args.n
    stream = EVAL_STREAM if args.heldout else TRAIN_STREAM
    difficulty = args.difficulty if args.difficulty is not None else (
        cfg["data"]["eval_difficulty"] if args.heldout else None)
    with limited_blas():
        tasks = generate_tasks(cfg["seed"], n, cfgmod.to_env_config(cfg), make_reasoner(cfg),
                               cfgmod.region_kwargs(cfg), difficulty=difficulty, stream=stream)
    os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
    try:
        write_tasks(args.out, tasks)
    except OSError as exc:
        raise OSError(f"could not write {args.out}: {exc}") from exc
    manifest = {
        "format": "seqvis-tasks",
        "version": 1,
        "seed": cfg["seed"],
        "config_hash": cfgmod.experiment_hash(cfg),
        "n_tasks": len(tasks),
        "stream": stream,
        "difficulty": difficulty,
        "tasks_file": os.path.basename(args.out),
        "tasks_sha256": _sha256(args.out),
    }
    validate(manifest, "manifest")
    dump_json(manifest, args.out + ".manifest.json")
    print(f"wrote {len(tasks)} tasks to {args.out}")
    return EXIT_OK


def cmd_segment(args):
    if args.task:
        task = _task_from_file(args.task, args.index)
        grid = task.grid
    else:
        if not (args.pgm and args.query):
            raise ConfigError("segment needs --task, or both --pgm and --query")
        pixels = read_pgm(args.pgm)
        try:
            with open(args.query) as fh:
                q = json.load(fh)
        except ValueError as exc:
            raise ParseError(f"{args.query}: {exc}") from exc
        try:
            if isinstance(q, dict) and "level" in q:
                q = intensity_query(float(q["level"]), int(q.get("dim", 16)))
            elif isinstance(q, dict):
                q = q["query"]
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"{args.query}: not a query vector or level ({exc})") from exc
        grid = grid_from_intensity(pixels, q)
    # segmentation draws no random numbers, so a seed is optional here
    seed = 0 if args.seed is None else args.seed
    rk = cfgmod.region_kwargs(cfgmod.load_config(args.config, args.set or (), seed))
    sal = compute_saliency(grid, rk.get("similarity", "cosine"))
    bank = build_region_bank(grid, saliency=sal, **rk)
    os.makedirs(args.out_dir, exist_ok=True)
    bank_json = bank.to_json()
    validate(bank_json, "bank")
    dump_json(bank_json, os.path.join(args.out_dir, "bank.json"))
    with open(os.path.join(args.out_dir, "saliency.pgm"), "wb") as fh:
        fh.write(sal.to_pgm())
    _write_overlay(sal, bank, os.path.join(args.out_dir, "overlay.ppm"), args.scale)
    print(f"{len(bank.regions)} local regions; wrote {args.out_dir}")
    return EXIT_OK


def _train(args, stages):
    cfg = _load_cfg(args)
    out_dir = args.out_dir or cfg["io"]["out_dir"]
    report = run_experiment(cfg, stages, init_checkpoint=getattr(args, "init", None), out_dir=out_dir)
    final = report["final"]
    print(f"accuracy {final['greedy_accuracy']:.4f}, mean vision steps {final['mean_vision_steps']:.3f}; "
          f"report in {os.path.join(out_dir, 'report.json')}")
    return EXIT_OK


def cmd_train_sft(args):
    return _train(args, ("sft",))


def cmd_train_rl(args):
    return _train(args, ("rl",))


def cmd_train(args):
    return _train(args, ("sft", "rl"))


def cmd_eval(args):
    cfg = _load_cfg(args)
    if args.tasks:
        tasks = read_tasks(args.tasks)
    else:
        with limited_blas():
            tasks = load_or_generate(cfg, "eval", make_reasoner(cfg))
    report = evaluate_checkpoint(cfg, args.checkpoint, tasks, args.fixed_k, args.order_mode, args.structure_mode,
                                 tables=not args.no_tables)
    if args.out:
        dump_json(report, args.out)
    else:
        json.dump(report, sys.stdout, indent=2, sort_keys=True)
        sys.stdout.write("\n")
    return EXIT_OK


def cmd_render(args):
    if args.task:
        task = _task_from_file(args.task, args.index)
        sal = compute_saliency(task.grid)
        bank = build_region_bank(task.grid, saliency=sal)
    else:
        if not (args.bank and args.saliency):
            raise ConfigError("render needs --task, or both --bank and --saliency")
        try:
            with open(args.bank) as fh:
                bank = RegionBank.from_json(json.load(fh))
        except (ValueError, KeyError) as exc:
            raise ParseError(f"{args.bank}: {exc}") from exc
        sal = SaliencyMap.from_pgm(open(args.saliency, "rb").read())
        if tuple(sal.shape) != tuple(bank.grid_shape):
            raise ParseError(f"saliency is {sal.shape} but the bank covers {tuple(bank.grid_shape)}")
    os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
    legend = _write_overlay(sal, bank, args.out, args.scale)
    print(f"wrote {args.out} with {len(legend['regions'])} outlined regions")
    return EXIT_OK


# -- parser -----------------------------------------------------------------------

def _add_config_args(p):
    p.add_argument("--config", help="JSON config file (defaults fill in anything missing)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key, e.g. train.beta=1.0")
    p.add_argument("--seed", type=int, help="experiment seed (required unless the config sets one)")


def build_parser():
    parser = _Parser(prog="seqvis", description="Saliency-guided sequential visual access on a synthetic task suite.")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="generate a JSON-lines task file and its manifest")
    _add_config_args(p)
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, help="number of tasks (default data.n_train)")
    p.add_argument("--difficulty", type=int)
    p.add_argument("--heldout", action="store_true", help="draw from the held-out stream")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("segment", help="build a region bank from a task or a PGM + query")
    _add_config_args(p)
    p.add_argument("--task", help="JSON-lines task file")
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--pgm", help="greyscale P5 image, one patch per pixel")
    p.add_argument("--query", help="JSON query vector (bare or under \"query\"); "
                                   "{\"level\": v, \"dim\": d} targets an intensity instead")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--scale", type=int, default=8)
    p.set_defaults(func=cmd_segment)

    for name, func, helptext in (("train-sft", cmd_train_sft, "behaviour cloning only"),
                                 ("train-rl", cmd_train_rl, "GRPO from a behaviour-cloned checkpoint"),
                                 ("train", cmd_train, "both stages")):
        p = sub.add_parser(name, help=helptext)
        _add_config_args(p)
        p.add_argument("--out-dir", help="output directory (default io.out_dir)")
        if name == "train-rl":
            p.add_argument("--init", required=True, help="checkpoint to start from and anchor the KL term to")
        p.set_defaults(func=func)

    p = sub.add_parser("eval", help="greedy evaluation of a checkpoint")
    _add_config_args(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--tasks", help="JSON-lines task file (default: the held-out set from the config)")
    p.add_argument("--fixed-k", choices=("2", "3", "4", "adaptive"), default="adaptive")
    p.add_argument("--order-mode", choices=("cognition", "random"), default="cognition")
    p.add_argument("--structure-mode", choices=("saliency_regions", "patch_subset"), default="saliency_regions")
    p.add_argument("--no-tables", action="store_true", help="skip the ablation and budget tables")
    p.add_argument("--out", help="report path (default stdout)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("render", help="write a PPM overlay and legend")
    p.add_argument("--task")
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--bank")
    p.add_argument("--saliency", help="saliency PGM matching --bank")
    p.add_argument("--out", required=True)
    p.add_argument("--scale", type=int, default=8)
    p.set_defaults(func=cmd_render)
    return parser


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                            format="%(levelname)s %(name)s: %(message)s")
        max_threads()  # validate SSV_THREADS up front
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ParseError, CheckpointVersionError, GenerationError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (SeqvisError, OSError, ValueError, jsonschema.ValidationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
