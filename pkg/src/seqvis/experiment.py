"""End-to-end runs: data, behaviour cloning, GRPO, periodic evaluation,
checkpoints and reports."""

import json
import logging
import os

from . import config as cfgmod
from .envsim import ToyReasoner, generate_tasks, read_tasks
from .evaluation import ablation_table, budget_table, evaluate, patch_subset_banks
from .exceptions import InvalidArgumentError
from .numerics import RngStream
from .parallel import limited_blas, parallel_map
from .policy import PolicyParams, load_checkpoint, save_checkpoint
from .regions import build_region_bank
from .schemas import validate
from .training import curriculum_lambda, grpo_step, pseudo_expert_order, sft_step

log = logging.getLogger(__name__)

TRAIN_STREAM = "train_tasks"
EVAL_STREAM = "heldout_tasks"


def dump_json(obj, path):
    """Write canonical JSON (sorted keys, fixed indent) so reruns are byte-identical."""
    try:
        with open(path, "w") as fh:
            json.dump(obj, fh, indent=2, sort_keys=True)
            fh.write("\n")
    except OSError as exc:
        raise OSError(f"could not write {path}: {exc}") from exc


def build_banks(tasks, region_kwargs=None):
    region_kwargs = region_kwargs or {}
    return parallel_map(lambda t: build_region_bank(t.grid, **region_kwargs), tasks)


def make_reasoner(cfg):
    return ToyReasoner.from_seed(cfg["reasoner_seed"], cfgmod.to_env_config(cfg))


def load_or_generate(cfg, which, reasoner):
    """Training or held-out tasks: read from the configured file, else generate."""
    path = cfg["io"]["train_tasks" if which == "train" else "eval_tasks"]
    if path:
        return read_tasks(path)
    data = cfg["data"]
    if which == "train":
        return generate_tasks(cfg["seed"], data["n_train"], cfgmod.to_env_config(cfg), reasoner,
                              cfgmod.region_kwargs(cfg), stream=TRAIN_STREAM)
    return generate_tasks(cfg["seed"], data["n_eval"], cfgmod.to_env_config(cfg), reasoner,
                          cfgmod.region_kwargs(cfg), difficulty=data["eval_difficulty"], stream=EVAL_STREAM)


def train_sft(params, tasks, banks, reasoner, tc, policy_config, rng, n_regions=5, on_epoch=None, on_batch=None):
    """Stage I: ``tc.sft_epochs`` passes of curriculum behaviour cloning."""
    if not tasks:
        raise InvalidArgumentError("behaviour cloning needs at least one training task")
    step = 0
    for epoch in range(tc.sft_epochs):
        lam = curriculum_lambda(epoch, tc.e_warm)
        er = rng.fork("sft", epoch)
        order = er.permutation(len(tasks))
        total = 0.0
        for start in range(0, len(tasks), tc.sft_batch):
            batch = []
            for i in order[start:start + tc.sft_batch]:
                ex = pseudo_expert_order(tasks[i], banks[i], lam, er, n_regions=n_regions, tile=tc.tile)
                batch.append((tasks[i], ex.bank, ex.actions))
            loss, params, info = sft_step(params, batch, reasoner, tc.lr, policy_config)
            step += 1
            total += loss
            if on_batch:
                on_batch({"stage": "sft", "step": step, "epoch": epoch, "lambda": lam, "loss": loss,
                          "skipped": info["skipped"]})
        if on_epoch:
            on_epoch(params, step, lam, total / len(tasks))
    return params, step


def train_rl(params, ref_params, tasks, banks, reasoner, tc, policy_config, rng, lam, on_step=None):
    """Stage II: ``tc.rl_steps`` GRPO updates anchored to ``ref_params``."""
    if not tasks:
        raise InvalidArgumentError("GRPO needs at least one training task")
    for s in range(tc.rl_steps):
        sr = rng.fork("rl", s)
        idx = sr.integers(0, len(tasks), tc.rl_batch)
        params, metrics, _ = grpo_step(params, ref_params, [(tasks[i], banks[i]) for i in idx], lam, tc,
                                       reasoner, sr, policy_config)
        if on_step:
            on_step(params, s + 1, metrics)
    return params


def _eval_row(stage, step, lam, params, reasoner, tasks, banks, policy_config, tc, seed, ref_params=None):
    res = evaluate(params, reasoner, tasks, banks, policy_config, tc.cap, seed=seed, ref_params=ref_params,
                   reward_weights=tc.reward_weights)
    return {"stage": stage, "step": step, "lambda": lam, "greedy_accuracy": res["accuracy"],
            "mean_vision_steps": res["mean_vision_steps"], "mean_reward": res["mean_reward"],
            "mean_kl": res.get("mean_kl")}


def run_experiment(cfg, stages=("sft", "rl"), init_checkpoint=None, out_dir=None):
    """Run the requested stages and write checkpoints, a JSON-lines training
    log and ``report.json`` into ``out_dir`` (default ``cfg["io"]["out_dir"]``).

    Stage II alone needs ``init_checkpoint`` (the behaviour-cloned policy,
    which also serves as the KL reference). Returns the report dict.
    """
    stages = tuple(stages)
    if not stages or any(s not in ("sft", "rl") for s in stages):
        raise InvalidArgumentError(f"stages must be drawn from ('sft', 'rl'), got {stages!r}")
    if "sft" not in stages and init_checkpoint is None:
        raise InvalidArgumentError("a Stage II run needs an initial checkpoint")
    out_dir = out_dir or cfg["io"]["out_dir"]
    os.makedirs(out_dir, exist_ok=True)
    env = cfgmod.to_env_config(cfg)
    tc = cfgmod.to_train_config(cfg)
    pc = cfgmod.to_policy_config(cfg)
    rk = cfgmod.region_kwargs(cfg)
    seed = cfg["seed"]
    chash = cfgmod.experiment_hash(cfg)
    hashed = {k: v for k, v in cfg.items() if k != "io"}
    rng = RngStream(seed, "experiment")
    evals = []
    checkpoints = {}

    with limited_blas(), open(os.path.join(out_dir, "train_log.jsonl"), "w") as logfh:
        def emit(record):
            logfh.write(json.dumps(record, sort_keys=True) + "\n")

        reasoner = make_reasoner(cfg)
        train_tasks = load_or_generate(cfg, "train", reasoner)
        eval_tasks = load_or_generate(cfg, "eval", reasoner)
        train_banks = build_banks(train_tasks, rk)
        eval_banks = build_banks(eval_tasks, rk)
        log.info("%d training tasks, %d held-out tasks", len(train_tasks), len(eval_tasks))

        if init_checkpoint is not None:
            params, header = load_checkpoint(init_checkpoint, env.d_l, env.d_v)
        else:
            params = PolicyParams.initialize(env.d_l, env.d_v, rng.fork("init"))
        evals.append(_eval_row("init", 0, 0.0, params, reasoner, eval_tasks, eval_banks, pc, tc, seed))

        if "sft" in stages:
            def on_epoch(p, step, lam, mean_loss):
                log.info("behaviour cloning: step %d, lambda %.3f, mean loss %.4f", step, lam, mean_loss)
                evals.append(_eval_row("sft", step, lam, p, reasoner, eval_tasks, eval_banks, pc, tc, seed))

            params, _ = train_sft(params, train_tasks, train_banks, reasoner, tc, pc, rng,
                                  n_regions=rk["n_regions"], on_epoch=on_epoch, on_batch=emit)
            save_checkpoint(os.path.join(out_dir, "sft.json"), params, hashed, tc.sft_epochs, pc)
            checkpoints["sft"] = "sft.json"

        if "rl" in stages:
            ref = params.copy()
            lam = curriculum_lambda(tc.sft_epochs, tc.e_warm)

            def on_step(p, step, metrics):
                emit({"stage": "rl", "step": step, "lambda": lam, "mean_reward": metrics["mean_reward"],
                      "mean_kl": metrics["mean_kl"], "task_accuracy": metrics["task_accuracy"],
                      "max_abs_advantage_sum": max(abs(a) for a in metrics["advantage_sums"]),
                      "zero_advantage_groups": metrics["zero_advantage_groups"]})
                if step % tc.eval_every == 0 or step == tc.rl_steps:
                    row = _eval_row("rl", step, lam, p, reasoner, eval_tasks, eval_banks, pc, tc, seed, ref)
                    log.info("GRPO step %d: accuracy %.3f, KL %.4f", step, row["greedy_accuracy"], row["mean_kl"])
                    evals.append(row)

            params = train_rl(params, ref, train_tasks, train_banks, reasoner, tc, pc, rng.fork("stage2"), lam,
                              on_step=on_step)
            save_checkpoint(os.path.join(out_dir, "policy.json"), params, hashed, tc.rl_steps, pc)
            checkpoints["policy"] = "policy.json"

    report = {
        "format": "seqvis-train-report",
        "version": 1,
        "seed": seed,
        "config_hash": chash,
        "n_train": len(train_tasks),
        "n_eval": len(eval_tasks),
        "stages": list(stages),
        "evals": evals,
        "final": evals[-1] if evals else None,
        "checkpoints": checkpoints,
    }
    validate(report, "train_report")
    dump_json(report, os.path.join(out_dir, "report.json"))
    return report


def evaluate_checkpoint(cfg, checkpoint, tasks, fixed_k="adaptive", order_mode="cognition",
                        structure_mode="saliency_regions", tables=True):
    """Greedy evaluation of a saved policy on ``tasks``; returns the report dict.

    ``tables`` adds the structure x order ablation and the fixed-K budget
    table computed on the same tasks.
    """
    env = cfgmod.to_env_config(cfg)
    tc = cfgmod.to_train_config(cfg)
    pc_cfg = cfgmod.to_policy_config(cfg)
    params, header = load_checkpoint(checkpoint, env.d_l, env.d_v)
    if header["config_hash"] != cfgmod.experiment_hash(cfg):
        log.warning("checkpoint was trained under a different config (hash %s...)", header["config_hash"][:12])
    pc = type(pc_cfg)(**header.get("policy_config", vars(pc_cfg)))
    seed = cfg["seed"]
    with limited_blas():
        reasoner = make_reasoner(cfg)
        banks = build_banks(tasks, cfgmod.region_kwargs(cfg))
        subset = patch_subset_banks(tasks, banks, seed)
        chosen = banks if structure_mode == "saliency_regions" else subset
        k = None if fixed_k == "adaptive" else int(fixed_k)
        res = evaluate(params, reasoner, tasks, chosen, pc, tc.cap, fixed_k=k, order=order_mode, seed=seed,
                       reward_weights=tc.reward_weights)
        report = {
            "format": "seqvis-eval-report",
            "version": 1,
            "seed": seed,
            "checkpoint_step": header["step"],
            "checkpoint_config_hash": header["config_hash"],
            "settings": {"fixed_k": str(fixed_k), "order_mode": order_mode, "structure_mode": structure_mode,
                         "cap": tc.cap},
            "n_tasks": res["n_tasks"],
            "accuracy": res["accuracy"],
            "mean_vision_steps": res["mean_vision_steps"],
            "mean_reward": res["mean_reward"],
            "per_difficulty": res["per_difficulty"],
        }
        if tables:
            report["ablation"] = ablation_table(params, reasoner, tasks, banks, subset, pc, tc.cap, seed)
            report["budget"] = budget_table(params, reasoner, tasks, banks, pc, tc.cap, seed)
    validate(report, "eval_report")
    return report
