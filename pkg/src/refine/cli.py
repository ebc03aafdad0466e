"""Command-line entry point: ``refine <subcommand> [options]``."""

from __future__ import annotations

import argparse
import itertools
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import ALIASES, ConfigError, RunConfig, canonical_key, parse_config
from .data import (TokenSequence, decode_bytes, encode, gen_copy_task, gen_corpus, gen_niah, load_corpus,
                   load_tasks, write_corpus, write_tasks)
from .evaluation import (EvalReport, config_digest, dump_diagnostics, eval_niah_recall, eval_ntp,
                         needle_recall, prompt_logprob, write_reports)
from .gradcheck import toy_grad_check
from .model import ModelParams, init_params, load_checkpoint
from .phases import mid_train, post_train_nested, ttt_adapt

log = logging.getLogger("refine")

SUBCOMMANDS = ("mid-train", "post-train", "ttt-eval", "eval", "gen-data", "grad-check",
               "dump-diagnostics")

# named flags -> config keys
_FLAG_KEYS = {
    "seed": "seed", "output_dir": "output_dir", "init": "init_checkpoint",
    "lambda_rl": "phase.lambda_rl", "lambda_sft": "phase.lambda_sft",
    "c": "phase.c", "k": "phase.k", "n": "phase.n", "tau": "phase.tau",
    "strategy": "phase.strategy", "reward": "phase.reward", "steps": "phase.steps",
    "lr": "phase.lr", "batch_size": "phase.batch_size", "ppo_mini_batch": "phase.ppo_mini_batch",
    "eval_every": "phase.eval_every", "mode": "phase.mode",
    "train": "data.train", "eval_data": "data.eval", "tasks": "data.tasks",
}


def _add_run_flags(p: argparse.ArgumentParser, sweep: bool) -> None:
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config key (repeatable)")
    p.add_argument("--seed")
    p.add_argument("--output-dir", dest="output_dir")
    p.add_argument("--init", help="checkpoint to start from")
    p.add_argument("--lambda-rl", dest="lambda_rl")
    p.add_argument("--lambda-sft", dest="lambda_sft")
    for name in ("c", "k", "n", "tau", "strategy", "reward", "steps", "lr", "mode"):
        p.add_argument(f"--{name}")
    p.add_argument("--batch-size", dest="batch_size")
    p.add_argument("--ppo-mini-batch", dest="ppo_mini_batch")
    p.add_argument("--eval-every", dest="eval_every")
    p.add_argument("--train", help="training corpus JSONL")
    p.add_argument("--eval-data", dest="eval_data", help="held-out corpus JSONL")
    p.add_argument("--tasks", help="task JSONL")
    if sweep:
        p.add_argument("--sweep", action="append", default=[], metavar="KEY=V1,V2,...",
                       help="run the cartesian product of the listed values, one output dir per cell")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="refine", description="Fast-weight language model training.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", metavar="{" + ",".join(SUBCOMMANDS) + "}")
    _add_run_flags(sub.add_parser("mid-train", help="entropy-guided rollout training on a corpus"), True)
    _add_run_flags(sub.add_parser("post-train", help="nested post-training on prompt/answer tasks"), True)
    _add_run_flags(sub.add_parser("ttt-eval", help="adapt on each task prompt, then answer it"), True)
    _add_run_flags(sub.add_parser("eval", help="held-out NTP and needle recall"), False)
    _add_run_flags(sub.add_parser("dump-diagnostics", help="reward and entropy CSVs for a run"), False)

    g = sub.add_parser("gen-data", help="write synthetic tasks or corpus as JSONL")
    g.add_argument("--task", choices=("niah", "copy", "corpus"), required=True)
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--length", type=int, default=448,
                   help="haystack bytes (niah) or sequence bytes (corpus)")
    g.add_argument("--needles", type=int, default=1)
    g.add_argument("--queries", type=int, default=1)
    g.add_argument("--payload-len", dest="payload_len", type=int, default=12)
    g.add_argument("--distractors", type=int, default=3)
    g.add_argument("--repeats", type=int, default=2)
    g.add_argument("--out", help="output path (default: <task>.jsonl)")

    gc = sub.add_parser("grad-check", help="finite-difference check on the toy model")
    gc.add_argument("--seed", type=int, default=0)
    gc.add_argument("--update-mode", dest="update_mode", default="per_token_delta")
    return parser


def _flags(args) -> dict[str, str]:
    out = {}
    for name, key in _FLAG_KEYS.items():
        value = getattr(args, name, None)
        if value is not None:
            out[key] = value
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        out[canonical_key(key)] = value
    return out


def _sweep_cells(specs: list[str]) -> list[list[tuple[str, str]]]:
    axes = []
    for spec in specs:
        if "=" not in spec:
            raise ConfigError(f"--sweep expects KEY=V1,V2,..., got {spec!r}")
        key, values = spec.split("=", 1)
        key = canonical_key(key)
        vals = [v.strip() for v in values.split(",") if v.strip()]
        if not vals:
            raise ConfigError(f"--sweep {key}: no values")
        axes.append([(key, v) for v in vals])
    return [list(cell) for cell in itertools.product(*axes)] if axes else [[]]


def _cell_name(cell) -> str:
    short = {v: k for k, v in ALIASES.items()}
    return "_".join(f"{short.get(k, k)}={v}" for k, v in cell)


# ----------------------------------------------------------------- loaders

def _initial_params(rc: RunConfig) -> ModelParams:
    path = rc.values["init_checkpoint"]
    if path:
        params = load_checkpoint(path)
        if params.config != rc.model:
            log.info("checkpoint model config overrides model.* keys")
        return params
    return init_params(rc.model, rc.seed)


def _corpus(rc: RunConfig) -> tuple[list, list]:
    """Training and held-out sequences, from files or a synthetic corpus."""
    d = rc.data
    T = rc.model.max_seq_len
    stride = d["stride"] or None
    if d["train"]:
        train = list(load_corpus(d["train"], T, stride))
    else:
        n = min(d["synthetic_len"], T)
        train = [TokenSequence(encode(t)) for t in gen_corpus(d["synthetic_seqs"], n, rc.seed)]
    if d["eval"]:
        held = list(load_corpus(d["eval"], T, stride))
    elif d["holdout"] and len(train) > d["holdout"]:
        train, held = train[:-d["holdout"]], train[-d["holdout"]:]
    else:
        held = []
    if not train:
        raise ValueError("training corpus is empty")
    return train, held


def _tasks(rc: RunConfig) -> list:
    """Tasks from ``data.tasks``, or up to 20 seeded copy tasks."""
    if rc.data["tasks"]:
        return load_tasks(rc.data["tasks"])
    n = max(1, min(rc.data["synthetic_seqs"], 20))
    return [gen_copy_task(4, 12, distractors=3, seed=rc.seed * 1000 + i, repeats=2) for i in range(n)]


def _reports(rc: RunConfig, params: ModelParams, held, task: str) -> list[EvalReport]:
    digest = config_digest(rc.values)
    if not held:
        return []
    acc, loss = eval_ntp(params, held)
    return [EvalReport(task, "ntp_accuracy", acc, len(held), rc.seed, digest),
            EvalReport(task, "ntp_loss", loss, len(held), rc.seed, digest)]


# ---------------------------------------------------------------- commands

def cmd_mid_train(rc: RunConfig) -> None:
    out = rc.output_dir
    rc.write(out)
    train, held = _corpus(rc)
    params = _initial_params(rc)
    result = mid_train(params, train, rc.phase, eval_set=held, out_dir=out)
    write_reports(out / "eval_report.jsonl", _reports(rc, result.params, held, "mid"))


def cmd_post_train(rc: RunConfig) -> None:
    out = rc.output_dir
    rc.write(out)
    tasks = _tasks(rc)
    params = _initial_params(rc)
    result = post_train_nested(params, tasks, rc.phase, mode=rc.values["phase.mode"], out_dir=out)
    seqs = [t.to_sequence() for t in tasks]
    write_reports(out / "eval_report.jsonl", _reports(rc, result.params, seqs, "post"))


def cmd_ttt_eval(rc: RunConfig) -> None:
    out = rc.output_dir
    rc.write(out)
    tasks = _tasks(rc)
    params = _initial_params(rc)
    scores = []
    with open(out / "metrics.jsonl", "w", encoding="utf-8") as fh:
        for i, task in enumerate(tasks):
            ids = encode(task.prompt)
            values = task.needles or [task.answer]
            gen_len = rc.values["phase.gen_len"] or max(len(v) for v in values) + 16
            res = ttt_adapt(params, ids, rc.phase, gen_len=gen_len)
            text = decode_bytes(res.response).decode("utf-8", errors="replace")
            score = needle_recall(text, values)
            scores.append(score)
            row = {"task": i, "adapted": res.adapted,
                   "prompt_logprob_before": prompt_logprob(params, ids),
                   "prompt_logprob_after": prompt_logprob(res.params, ids),
                   "recall": score, "response": text}
            if res.metrics:
                row.update({k: v for k, v in res.metrics[-1].items() if k not in ("step", "phase")})
            fh.write(json.dumps(row) + "\n")
    write_reports(out / "eval_report.jsonl",
                  [EvalReport("ttt", "answer_recall", float(np.mean(scores)), len(tasks), rc.seed,
                              config_digest(rc.values))])


def cmd_eval(rc: RunConfig) -> None:
    out = rc.output_dir
    rc.write(out)
    params = _initial_params(rc)
    digest = config_digest(rc.values)
    reports = []
    if rc.data["eval"]:
        held = list(load_corpus(rc.data["eval"], rc.model.max_seq_len, rc.data["stride"] or None))
        reports += _reports(rc, params, held, "ntp")
    if rc.data["tasks"]:
        tasks = load_tasks(rc.data["tasks"])
        gen_len = rc.values["phase.gen_len"] or None
        reports.append(EvalReport("niah", "niah_recall", eval_niah_recall(params, tasks, gen_len),
                                  len(tasks), rc.seed, digest))
    if not reports:
        raise ValueError("eval needs data.eval and/or data.tasks")
    write_reports(out / "eval_report.jsonl", reports)
    for r in reports:
        print(f"{r.task} {r.metric} {r.value:.6f} (n={r.n_samples})")


def cmd_dump_diagnostics(rc: RunConfig) -> None:
    run_dir = rc.output_dir
    params, sample = None, None
    ckpt = rc.values["init_checkpoint"] or str(run_dir / "checkpoint_final.rfnw")
    if Path(ckpt).exists():
        params = load_checkpoint(ckpt)
        if rc.data["eval"]:
            sample = next(iter(load_corpus(rc.data["eval"], params.config.max_seq_len)))
        else:
            sample = encode(gen_corpus(1, min(256, params.config.max_seq_len), rc.seed)[0])
    for path in dump_diagnostics(run_dir / "metrics.jsonl", run_dir, params, sample):
        print(path)


def cmd_gen_data(args) -> None:
    out = Path(args.out or f"{args.task}.jsonl")
    out.parent.mkdir(parents=True, exist_ok=True)
    if args.n < 1:
        raise ValueError("--n must be >= 1")
    if args.task == "corpus":
        write_corpus(out, gen_corpus(args.n, args.length, args.seed))
    elif args.task == "niah":
        write_tasks(out, [gen_niah(args.length, args.needles, args.queries, seed=args.seed * 100003 + i)
                          for i in range(args.n)])
    else:
        write_tasks(out, [gen_copy_task(4, args.payload_len, args.distractors,
                                        seed=args.seed * 100003 + i, repeats=args.repeats)
                          for i in range(args.n)])
    print(out)


def cmd_grad_check(args) -> int:
    res = toy_grad_check(seed=args.seed, update_mode=args.update_mode)
    print(f"ntp max relative error      {res.ntp_error:.3e}")
    print(f"combined max relative error {res.combined_error:.3e}")
    print(f"parameters checked          {res.n_params}")
    return 0 if res.worst < 1e-2 else 1


_RUNNERS = {"mid-train": cmd_mid_train, "post-train": cmd_post_train, "ttt-eval": cmd_ttt_eval,
            "eval": cmd_eval, "dump-diagnostics": cmd_dump_diagnostics}


def run_command(argv: list[str] | None = None) -> int:
    """Parse ``argv`` and run one subcommand. Returns the process exit status."""
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    if not argv:
        parser.print_usage(sys.stderr)
        return 2
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "gen-data":
            cmd_gen_data(args)
            return 0
        if args.command == "grad-check":
            return cmd_grad_check(args)
        flags = _flags(args)
        cells = _sweep_cells(getattr(args, "sweep", []))
        base_dir = Path(flags.get("output_dir") or parse_config(args.config, flags).values["output_dir"])
        for cell in cells:
            cell_flags = dict(flags, **dict(cell))
            if cell:
                cell_flags["output_dir"] = str(base_dir / _cell_name(cell))
            rc = parse_config(args.config, cell_flags)
            _RUNNERS[args.command](rc)
    except (ConfigError, ValueError, FileNotFoundError, OSError) as err:
        print(f"refine {args.command}: error: {err}", file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(run_command())


if __name__ == "__main__":
    main()
