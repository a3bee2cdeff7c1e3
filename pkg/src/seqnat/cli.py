"""``seqnat`` command line: data generation, training, evaluation, benches, correlation.

Every command writes into ``output.dir`` the verbatim config (``config.txt``),
a ``manifest.json`` with versions and seed, and its declared outputs.
Failures print one line ``error: <Kind>: <message>`` to stderr and exit non-zero.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import platform
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import RunConfig
from .core import InvalidInput, make_rng, softmax_rows
from .estimators import (
    ENUMERATION_LIMIT,
    EstimatorConfig,
    Method,
    canonical_instance,
    estimator_variance_bench,
    expected_reward_calls,
    run_estimator,
)
from .model import ModelParams, load_checkpoint, save_checkpoint
from .pipeline import TaskSpec, correlate_losses, evaluate, generate_corpus, parse_strategy, read_corpus, train, write_corpus
from .rewards import RewardFn, RewardKind

log = logging.getLogger("seqnat")

BENCH_FIELDS = ("method", "k", "n_samples", "runs", "total_variance", "mse_vs_oracle",
                "reward_calls", "wall_time_s", "variance_order_ok")
COMPLEXITY_FIELDS = ("trial", "method", "V", "T", "n_samples", "k", "ref_distinct",
                     "reward_calls", "closed_form", "match")
CORRELATION_KEYS = ("pearson_ce", "pearson_bon", "n_sentences")
VARIANCE_ORDER = (Method.BASE, Method.STEP, Method.TOPK, Method.TRAVERSE_REF)


class CliError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        sys.stderr.write(f"error: UsageError: {message}\n")
        raise SystemExit(2)


# ---------------------------------------------------------------------------
# run directory helpers


def _prepare_outputs(cfg: RunConfig, outputs: list[str], force: bool) -> Path:
    out = Path(cfg["output.dir"])
    existing = [name for name in outputs + ["config.txt", "manifest.json"] if (out / name).exists()]
    if existing and not force:
        raise CliError(f"refusing to overwrite {out / existing[0]} (pass --force)")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_run_meta(out: Path, cfg: RunConfig, command: str) -> None:
    (out / "config.txt").write_text(cfg.text, encoding="utf-8")
    manifest = {
        "command": command,
        "seed": cfg["run.seed"],
        "threads": cfg["run.threads"],
        "config_source": str(cfg.source) if cfg.source else None,
        "versions": {"seqnat": __version__, "numpy": np.__version__, "python": platform.python_version()},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _task_spec(cfg: RunConfig) -> TaskSpec:
    return TaskSpec(kind=cfg["task.kind"], v_src=cfg["task.v_src"], v_tgt=cfg["task.v_tgt"],
                    t_min=cfg["task.t_min"], t_max=cfg["task.t_max"], n_pairs=cfg["task.n_pairs"],
                    seed=cfg["run.seed"], valid_frac=cfg["task.valid_frac"], test_frac=cfg["task.test_frac"])


def _corpus(cfg: RunConfig):
    if cfg["data.dir"]:
        return read_corpus(cfg["data.dir"])
    return generate_corpus(_task_spec(cfg))


def _init_params(cfg: RunConfig, corpus) -> ModelParams:
    spec = corpus.spec
    max_len = cfg["model.max_len"] or spec.t_max
    return ModelParams.init(spec.v_src, spec.v_tgt, cfg["model.d"], cfg["model.h"], max_len,
                            make_rng(cfg["run.seed"], 99))


def _schedule(cfg: RunConfig):
    return parse_strategy(cfg["train.strategy"], cfg.list("train.steps", int),
                          cfg.list("train.batch_size", int), cfg.list("train.lr", float),
                          n_samples=cfg["rl.n_samples"], k=cfg["rl.k"], reward=cfg["rl.reward"])


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(cfg: RunConfig, force: bool) -> Path:
    out = _prepare_outputs(cfg, ["train.tsv", "valid.tsv", "test.tsv", "corpus.json"], force)
    write_corpus(generate_corpus(_task_spec(cfg)), out)
    _write_run_meta(out, cfg, "gen-data")
    return out


def cmd_train(cfg: RunConfig, force: bool) -> Path:
    schedule = _schedule(cfg)
    corpus = _corpus(cfg)
    start = cfg["train.resume_stage"]
    if cfg["train.resume_from"]:
        params, _ = load_checkpoint(cfg["train.resume_from"])
    elif start:
        raise CliError("train.resume_stage needs train.resume_from")
    else:
        params = _init_params(cfg, corpus)
    if not 0 <= start < len(schedule.stages):
        raise CliError(f"train.resume_stage must lie in [0, {len(schedule.stages)})")
    ckpts = [f"checkpoints/stage{i}.npz" for i in range(start, len(schedule.stages))]
    out = _prepare_outputs(cfg, ckpts + ["train_log.csv", "metrics.json"], force)
    params, tlog = train(corpus, params, schedule, cfg["run.seed"], eval_every=cfg["train.eval_every"],
                         eval_limit=cfg["train.eval_limit"], threads=cfg["run.threads"],
                         checkpoint_dir=out / "checkpoints", start_stage=start)
    tlog.write_csv(out / "train_log.csv")
    metrics = evaluate(params, corpus.test, [RewardKind.GLEU, RewardKind.BLEU, RewardKind.ROUGE2])
    metrics["reward_calls"] = tlog.reward_calls
    metrics["stage_start_digests"] = tlog.stage_digests
    metrics["final_digest"] = params.digest()
    _write_json(out / "metrics.json", metrics)
    _write_run_meta(out, cfg, "train")
    return out


def cmd_eval(cfg: RunConfig, force: bool) -> Path:
    if not cfg["eval.checkpoint"]:
        raise CliError("eval.checkpoint is required")
    params, _ = load_checkpoint(cfg["eval.checkpoint"])
    corpus = _corpus(cfg)
    out = _prepare_outputs(cfg, ["eval.json"], force)
    metrics = evaluate(params, corpus.split(cfg["eval.split"]), cfg.list("eval.metrics"))
    metrics["split"] = cfg["eval.split"]
    metrics["n_sentences"] = len(corpus.split(cfg["eval.split"]))
    _write_json(out / "eval.json", metrics)
    _write_run_meta(out, cfg, "eval")
    return out


def cmd_estimator_bench(cfg: RunConfig, force: bool) -> Path:
    methods = [Method.parse(m) for m in cfg.list("bench.methods")]
    out = _prepare_outputs(cfg, ["bench.csv"], force)
    p, ref = canonical_instance(cfg["bench.V"], cfg["bench.T"], cfg["bench.peak"], cfg["bench.instance_seed"])
    reward = RewardFn(cfg["bench.reward"], ref)
    cfgs = [EstimatorConfig(method=m, n_samples=cfg["bench.n_samples"], k=min(cfg["bench.k"], cfg["bench.V"]),
                            reward=cfg["bench.reward"]) for m in methods]
    results = estimator_variance_bench(p, reward, cfgs, cfg["bench.runs"], make_rng(cfg["run.seed"]))
    variance = {r.method: r.total_variance for r in results}
    with open(out / "bench.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(BENCH_FIELDS)
        for r in results:
            writer.writerow([r.method.value, r.k, r.n_samples, r.runs, repr(r.total_variance),
                             "NA" if r.mse_vs_oracle is None else repr(r.mse_vs_oracle),
                             r.reward_calls, f"{r.wall_time:.6f}", _order_flag(r.method, variance)])
    _write_run_meta(out, cfg, "estimator-bench")
    return out


def _order_flag(method: Method, variance: dict) -> str:
    """1/0 for whether ``method`` has no more variance than its predecessor in Base>=Step>=Topk>=TR."""
    if method not in VARIANCE_ORDER:
        return "NA"
    earlier = [m for m in VARIANCE_ORDER[:VARIANCE_ORDER.index(method)] if m in variance]
    if not earlier:
        return "1"
    return "1" if variance[method] <= variance[earlier[-1]] else "0"


def complexity_rows(trials: int, max_V: int, max_T: int, max_n: int, seed: int) -> list[dict]:
    """Count reward calls of every estimator on random configurations and compare to closed forms."""
    rng = make_rng(seed, 7)
    rows = []
    for trial in range(trials):
        V = int(rng.integers(3, max_V + 1))
        T = int(rng.integers(1, max_T + 1))
        n = int(rng.integers(1, max_n + 1))
        k = int(rng.integers(1, V + 1))
        z = rng.normal(size=(T, V))
        # saturate some rows so the top-k residual is sometimes empty
        z[rng.random(T) < 0.3, 0] += 60.0
        p = softmax_rows(z)
        ref = rng.integers(0, V - 1, size=T)
        for method in Method:
            reward = RewardFn(RewardKind.ROUGE2, ref)
            ecfg = EstimatorConfig(method=method, n_samples=n, k=k)
            rep = run_estimator(p, reward, ecfg, make_rng(seed, 8, trial))
            closed = expected_reward_calls(p, reward, ecfg)
            rows.append({"trial": trial, "method": method.value, "V": V, "T": T, "n_samples": n, "k": k,
                         "ref_distinct": int(np.unique(ref).size), "reward_calls": rep.reward_calls,
                         "closed_form": closed, "match": int(rep.reward_calls == closed)})
    return rows


def cmd_complexity_bench(cfg: RunConfig, force: bool) -> Path:
    out = _prepare_outputs(cfg, ["complexity.csv"], force)
    rows = complexity_rows(cfg["complexity.trials"], cfg["complexity.max_V"], cfg["complexity.max_T"],
                           cfg["complexity.max_n"], cfg["run.seed"])
    with open(out / "complexity.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=COMPLEXITY_FIELDS, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    _write_run_meta(out, cfg, "complexity-bench")
    bad = [r for r in rows if not r["match"]]
    if bad:
        raise CliError(f"{len(bad)} reward-call counts differ from the closed form (see complexity.csv)")
    return out


def cmd_correlate(cfg: RunConfig, force: bool) -> Path:
    n = cfg["correlate.n"]
    if n < 100:
        raise CliError(f"correlate.n must be >= 100, got {n}")
    corpus = _corpus(cfg)
    split = corpus.split(cfg["correlate.split"])[:n]
    if len(split) < 100:
        raise CliError(f"split {cfg['correlate.split']!r} has only {len(split)} sentences (< 100)")
    out = _prepare_outputs(cfg, ["correlation.json"], force)
    if cfg["correlate.checkpoint"]:
        params, _ = load_checkpoint(cfg["correlate.checkpoint"])
    else:
        params = _init_params(cfg, corpus)
        schedule = parse_strategy("ce", cfg["correlate.ce_steps"], cfg["correlate.batch_size"], cfg["correlate.lr"])
        params, _ = train(corpus, params, schedule, cfg["run.seed"], threads=cfg["run.threads"])
    result = correlate_losses(params, split, cfg["correlate.ngram"])
    _write_json(out / "correlation.json", {k: result[k] for k in CORRELATION_KEYS})
    _write_run_meta(out, cfg, "correlate")
    return out


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "estimator-bench": cmd_estimator_bench,
    "complexity-bench": cmd_complexity_bench,
    "correlate": cmd_correlate,
}


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", type=Path, help="flat key = value config file")
    common.add_argument("--seed", type=int, help="overrides run.seed")
    common.add_argument("--threads", type=int, help="overrides run.threads")
    common.add_argument("--force", action="store_true", help="overwrite existing outputs")
    common.add_argument("-v", "--verbose", action="store_true")
    parser = _Parser(prog="seqnat", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        sub.add_parser(name, parents=[common])
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = RunConfig.load(args.config) if args.config else RunConfig.parse("")
        if args.seed is not None:
            cfg.set("run.seed", args.seed)
        if args.threads is not None:
            cfg.set("run.threads", args.threads)
        out = COMMANDS[args.command](cfg, args.force)
    except (CliError, InvalidInput, OSError, ValueError, RuntimeError) as exc:
        msg = " ".join(str(exc).split())
        sys.stderr.write(f"error: {type(exc).__name__}: {msg}\n")
        return 1
    print(out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
