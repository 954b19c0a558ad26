"""Command-line entry point: ``uvlg <command> [flags]`` or ``python -m uvlg``.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numeric failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import datetime
import json
import os
import platform
import sys
import warnings

import numpy as np

from . import __version__
from .checkpoint import Checkpoint, CheckpointError, build_model
from .data import DataError, Dataset, collate, encode_example
from .nn_core import NonFiniteError
from .nn_core.layers import ConfigError
from .synthworld import DatasetManifest, ManifestError, synth
from .tasks import PREFIXES, TaskError, read_corpus

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def write_stamp(path, command: str, argv, config, seed) -> None:
    """Reproducibility stamp; the only output that carries a timestamp."""
    stamp = {
        "command": command,
        "argv": list(argv),
        "config": config,
        "seed": seed,
        "version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "created": datetime.datetime.now(datetime.timezone.utc).isoformat(timespec="seconds"),
    }
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(stamp, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _flags(args) -> dict:
    return {k: v for k, v in vars(args).items() if k != "func"}


def _stamp_for(output: str) -> str:
    return os.path.join(output, "stamp.json") if os.path.isdir(output) else output + ".stamp.json"


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_synth(args, argv) -> int:
    manifest = DatasetManifest.load(args.manifest) if args.manifest else DatasetManifest()
    if args.seed is not None:
        manifest = dataclasses.replace(manifest, seed=args.seed)
        manifest.validate()
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        info = synth(manifest, args.out)
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    write_stamp(_stamp_for(args.out), "synth", argv, json.loads(manifest.to_json()), manifest.seed)
    print(f"wrote {sum(info['scenes'].values())} scenes, vocab {info['vocab_size']} tokens, "
          f"top-{len(info['topk'])} answers, {len(info['out_of_domain'])} out-of-domain to {args.out}")
    return EXIT_OK


def _train_config(args):
    from .training import TrainConfig
    cfg = TrainConfig.load(args.config)
    over = {}
    if getattr(args, "init", None):
        over["init"] = args.init
    if getattr(args, "steps", None) is not None:
        over["steps"] = args.steps
    if getattr(args, "mode", None):
        over["mode"] = args.mode
    if getattr(args, "head_mode", None):
        over["head_mode"] = args.head_mode
    if getattr(args, "tasks", None):
        over["tasks"] = tuple(t.strip() for t in args.tasks.split(",") if t.strip())
    if over:
        cfg = dataclasses.replace(cfg, **over)
    if not cfg.checkpoint:
        raise ConfigError("config must set [train] checkpoint (output path)")
    out_dir = os.path.dirname(os.path.abspath(cfg.checkpoint))
    os.makedirs(out_dir, exist_ok=True)
    if cfg.log and os.path.exists(cfg.log):
        os.remove(cfg.log)  # a rerun replaces the old log
    return cfg


def _limit_threads(args):
    from threadpoolctl import threadpool_limits
    return threadpool_limits(args.workers) if args.workers else _Null()


class _Null:
    def __enter__(self):
        return self

    def __exit__(self, *exc):
        return False


def cmd_train(args, argv) -> int:
    from . import training
    cfg = _train_config(args)
    with _limit_threads(args):
        if args.command == "pretrain":
            ck = training.pretrain(cfg)
        elif args.command == "finetune":
            if args.task not in PREFIXES:
                raise UsageError(f"unknown task tag {args.task!r}")
            ck = training.finetune(args.task, cfg)
        else:
            ck = training.multitask_finetune(cfg.tasks, cfg)
    ck.save(cfg.checkpoint)
    write_stamp(_stamp_for(cfg.checkpoint), args.command, argv, cfg.to_ini(), cfg.seed)
    if args.command == "multitask":
        from .evaldecode import evaluate
        ds = Dataset(cfg.data_dir)
        model = build_model(ck)
        for t in cfg.tasks:
            for r in evaluate(model, ds, t, cfg.eval_split, limit=cfg.eval_examples, prefixes=cfg.prefixes()):
                print(r.to_json())
    print(f"checkpoint written to {cfg.checkpoint} after {ck.state.get('step', 0)} steps")
    return EXIT_OK


def _data_for(args, ck) -> Dataset:
    root = args.data
    if not root:
        from .training import TrainConfig
        ini = ck.state.get("train_config")
        root = TrainConfig.from_ini(ini, env={}).data_dir if ini else ""
    if not root:
        raise UsageError("no data directory: pass --data")
    ds = Dataset(root)
    if ck.vocab and ck.vocab != ds.vocab.to_text():
        raise DataError(f"vocabulary of {root} does not match the checkpoint")
    return ds


def cmd_eval(args, argv) -> int:
    from .evaldecode import evaluate, write_reports
    if args.task not in PREFIXES:
        raise UsageError(f"unknown task tag {args.task!r}")
    ck = Checkpoint.load(args.ckpt)
    ds = _data_for(args, ck)
    model = build_model(ck)
    mode = args.mode or "gen"
    if mode == "disc" and args.task == "vqa" and not model.cfg.vqa_candidates:
        raise UsageError("checkpoint has no discriminative VQA head; finetune with mode = disc first")
    rows = evaluate(model, ds, args.task, args.split, mode, args.limit)
    for r in rows:
        print(r.to_json())
    if args.out:
        write_reports(args.out, rows)
        write_stamp(_stamp_for(args.out), "eval", argv, _flags(args), None)
    return EXIT_OK


def cmd_generate(args, argv) -> int:
    from .evaldecode import DecodeConfig, generate
    ck = Checkpoint.load(args.ckpt)
    ds = _data_for(args, ck)
    model = build_model(ck)
    try:
        examples = read_corpus(args.input)
    except (json.JSONDecodeError, KeyError) as e:
        raise DataError(f"{args.input}: not a task-example JSON Lines file ({e})") from None
    scenes = ds.scenes(args.split)
    for ex in examples:
        missing = [s for s in ex.scene_ids if s not in scenes.roi]
        if missing:
            raise DataError(f"scene {missing[0]!r} not found in split {args.split!r}")
    strategy = "beam" if args.beam > 1 else "greedy"
    sentinels = frozenset(ds.vocab.visual_id(k) for k in range(1, model.cfg.n_regions + 1))
    lines = []
    for ex in examples:
        # grounding answers are a single region sentinel, as in eval
        if ex.task in ("ground", "refexp"):
            dcfg = DecodeConfig(strategy, args.beam, 1, sentinels)
        else:
            dcfg = DecodeConfig(strategy, args.beam, args.max_length)
        item = encode_example(ex, ds.vocab)
        batch = collate([item], scenes, model.cfg.decoder_start_id, model.cfg.n_regions, with_targets=False)
        head = ex.task if ex.task in model.cfg.head_tasks and model.cfg.head_mode == "per-task" else None
        ids = generate(model, batch, dcfg, ds.vocab.eos_id, head)[0]
        lines.append(json.dumps({"task": ex.task, "input": ex.input, "output": ds.vocab.decode(ids)}))
    text = "\n".join(lines) + ("\n" if lines else "")
    if args.out:
        with open(args.out, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        write_stamp(_stamp_for(args.out), "generate", argv, _flags(args), None)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def inspect_lines(ck: Checkpoint) -> list:
    cfg = ck.config
    out = [f"config: {json.dumps(cfg, sort_keys=True)}"]
    params = ck.params()
    total = 0
    for name in sorted(params):
        arr = params[name]
        total += arr.size
        out.append(f"{name}\t{tuple(arr.shape)}\t{arr.dtype}")
    groups = {}
    for alias, canon in sorted(ck.tying.items()):
        groups.setdefault(canon, [canon]).append(alias)
    for canon, members in sorted(groups.items()):
        out.append("tied: " + " = ".join(members))
    heads = [n for n in params if n.startswith("task_heads.")]
    head_params = sum(params[n].size for n in heads)
    out.append(f"task heads: {len(heads)} x {cfg['vocab_size']} x {cfg['d']} = {head_params}")
    out.append(f"parameters: {total}")
    out.append(f"step: {ck.state.get('step', 0)}")
    return out


def cmd_inspect(args, argv) -> int:
    ck = Checkpoint.load(args.ckpt)
    print("\n".join(inspect_lines(ck)))
    return EXIT_OK


def cmd_plot(args, argv) -> int:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    matplotlib.rcParams["svg.hashsalt"] = "uvlg"
    series = {}
    for path in args.logs:
        with open(path, encoding="utf-8") as fh:
            for ln in fh:
                if not ln.strip():
                    continue
                rec = json.loads(ln)
                if "loss" in rec and args.metric == "loss":
                    series.setdefault(f"{os.path.basename(path)}:{rec['task']}", []).append((rec["step"], rec["loss"]))
                elif rec.get("metric") == args.metric and rec.get("subset", "all") == "all":
                    x = rec.get("step", len(series.get(rec["task"], [])))
                    series.setdefault(f"{os.path.basename(path)}:{rec['task']}", []).append((x, rec["value"]))
    if not series:
        raise DataError(f"no records with metric {args.metric!r} in {', '.join(args.logs)}")
    fig, ax = plt.subplots(figsize=(7, 4))
    for label in sorted(series):
        xs, ys = zip(*series[label])
        ax.plot(xs, ys, marker="." if len(xs) < 50 else None, label=label)
    ax.set_xlabel("step")
    ax.set_ylabel(args.metric)
    if args.metric == "loss":
        ax.set_yscale("log")
    ax.legend(fontsize="small")
    fig.tight_layout()
    fig.savefig(args.out, format="svg", metadata={"Date": None})
    plt.close(fig)
    print(f"wrote {args.out}")
    return EXIT_OK


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="uvlg", description="Unified vision-and-language generation on a toy world.")
    p.add_argument("--version", action="version", version=f"uvlg {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a synthetic world and all task corpora")
    s.add_argument("--manifest", help="manifest JSON (default: built-in toy manifest)")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--seed", type=int, help="override the manifest seed")
    s.set_defaults(func=cmd_synth)

    for name, helptext in (("pretrain", "multi-task pretraining"), ("finetune", "single-task finetuning"),
                           ("multitask", "round-robin multi-task finetuning")):
        t = sub.add_parser(name, help=helptext)
        t.add_argument("--config", required=True, help="INI training config")
        t.add_argument("--init", help="initial checkpoint")
        t.add_argument("--steps", type=int, help="override [train] steps")
        t.add_argument("--workers", type=int, default=0, help="BLAS threads (0 = library default)")
        if name == "finetune":
            t.add_argument("--task", required=True, help="task tag")
            t.add_argument("--mode", choices=("gen", "disc"), help="generative or discriminative baseline")
        if name == "multitask":
            t.add_argument("--tasks", help="comma-separated task tags (default: [train] tasks)")
            t.add_argument("--head-mode", choices=("shared", "per-task"))
        t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on one task")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--task", required=True)
    e.add_argument("--split", default="test")
    e.add_argument("--mode", choices=("gen", "disc"))
    e.add_argument("--data", help="data directory (default: the one recorded in the checkpoint)")
    e.add_argument("--limit", type=int, help="evaluate only the first N examples")
    e.add_argument("--out", help="write EvalReport JSON Lines here")
    e.set_defaults(func=cmd_eval)

    g = sub.add_parser("generate", help="decode target text for task examples")
    g.add_argument("--ckpt", required=True)
    g.add_argument("--input", required=True, help="task-example JSON Lines")
    g.add_argument("--data", help="data directory holding the referenced scenes")
    g.add_argument("--split", default="test", help="split whose scenes the inputs reference")
    g.add_argument("--beam", type=int, default=1, help="beam width (1 = greedy)")
    g.add_argument("--max-length", type=int, default=20)
    g.add_argument("--out", help="output JSON Lines (default: stdout)")
    g.set_defaults(func=cmd_generate)

    i = sub.add_parser("inspect", help="list tensors, tying groups and parameter counts")
    i.add_argument("--ckpt", required=True)
    i.set_defaults(func=cmd_inspect)

    pl = sub.add_parser("plot", help="render loss or metric curves to SVG")
    pl.add_argument("logs", nargs="+", help="training logs or EvalReport files")
    pl.add_argument("--metric", default="loss")
    pl.add_argument("--out", required=True, help="output .svg path")
    pl.set_defaults(func=cmd_plot)
    return p


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = build_parser().parse_args(argv)
        return args.func(args, argv)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, TaskError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, ManifestError, CheckpointError, FileNotFoundError, json.JSONDecodeError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (FloatingPointError, NonFiniteError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
