"""Command-line entry point: ``diqdiff <command> [flags]``.

Exit codes: 0 success, 2 usage or invalid input, 3 numerical failure,
4 missing checkpoint or data file.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, fields
from pathlib import Path

from .config import DEFAULTS, TrainConfig, dotted, load_config_file
from .data import (SyntheticSpec, inject_noise, inject_sparsity, leave_one_out_split,
                   holdout_views, load_corpus, read_corpus, save_corpus, synthesize_corpus,
                   UserSequence)
from .errors import CheckpointError, ConfigError, DiQDiffError, NumericalFailure
from .seeding import derive_seed

log = logging.getLogger("diqdiff")

EXIT_OK, EXIT_USAGE, EXIT_NUMERICAL, EXIT_MISSING = 0, 2, 3, 4

CKPT_BEST = "ckpt_best.bin"
CKPT_LAST = "ckpt_last.bin"
METRICS = "metrics.json"
TRAIN_LOG = "train_log.jsonl"
EMBEDDINGS = "embeddings.csv"

# seed sub-stream for the final test evaluation, disjoint from the training streams
_TEST_STREAM = 100


class UsageError(Exception):
    pass


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def _config_help() -> str:
    lines = ["config keys (flag, dotted key, default):"]
    for f in fields(TrainConfig):
        lines.append(f"  {_flag(f.name):16s} {dotted(f.name):22s} {getattr(DEFAULTS, f.name)!r}")
    return "\n".join(lines)


def add_config_flags(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("config keys (flags > --config file > defaults)")
    group.add_argument("--config", help="flat JSON file of dotted keys")
    for f in fields(TrainConfig):
        text = f"{dotted(f.name)}: {f.metadata['help']} (default: {getattr(DEFAULTS, f.name)})"
        if f.type in ("bool", bool):
            group.add_argument(_flag(f.name), dest=f"cfg_{f.name}",
                               action=argparse.BooleanOptionalAction,
                               default=argparse.SUPPRESS, help=text)
        else:
            group.add_argument(_flag(f.name), dest=f"cfg_{f.name}", metavar=f.name.upper(),
                               default=argparse.SUPPRESS, help=text)


def resolve_config(args, base: TrainConfig = DEFAULTS) -> TrainConfig:
    cfg = base
    if getattr(args, "config", None):
        cfg = TrainConfig.from_flat(load_config_file(args.config), base=cfg)
    given = {dotted(k[4:]): v for k, v in vars(args).items() if k.startswith("cfg_")}
    return TrainConfig.from_flat(given, base=cfg)


def out_dir(args) -> Path:
    path = args.out_dir or os.environ.get("DIQDIFF_OUT_DIR") or "."
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _require(path) -> Path:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such file: {path}")
    return path


def _load_state(args):
    from .checkpoint import load_checkpoint

    path = args.checkpoint or (out_dir(args) / CKPT_BEST)
    return load_checkpoint(_require(path))


def _split_views(path, max_len):
    corpus = leave_one_out_split(load_corpus(_require(path), max_len))
    return corpus, holdout_views(corpus)


def _check_items(state, corpus) -> None:
    if corpus.item_count != state.n_items:
        raise ConfigError(f"data has {corpus.item_count} items, checkpoint expects "
                          f"{state.n_items}")


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    if args.seq_len_min > args.seq_len_max:
        raise UsageError("--seq-len-min exceeds --seq-len-max")
    spec = SyntheticSpec(users=args.users, items=args.items, clusters=args.clusters,
                         seq_len_range=(args.seq_len_min, args.seq_len_max),
                         noise_rate=args.noise, sparsity_rate=args.sparsity, seed=args.seed)
    try:
        spec.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    corpus = synthesize_corpus(spec)
    target = Path(args.out) if args.out else out_dir(args) / "synthetic.tsv"
    target.parent.mkdir(parents=True, exist_ok=True)
    save_corpus(corpus, target)
    _write_json(target.with_name(target.name + ".spec.json"),
                {**asdict(spec), "seq_len_range": list(spec.seq_len_range),
                 "users_written": len(corpus)})
    print(target)
    return EXIT_OK


def cmd_perturb(args) -> int:
    src = _require(args.data)
    corpus = read_corpus(src, item_count=0, max_len=1)
    items = {i for s in corpus.sequences for i in s.history}
    corpus = corpus.replace(item_count=max(items) if items else 0)
    # noise first, then deletions
    corpus = inject_noise(corpus, args.noise, derive_seed(args.seed, 0))
    corpus = inject_sparsity(corpus, args.sparsity, derive_seed(args.seed, 1))
    target = Path(args.out) if args.out else out_dir(args) / (src.stem + ".perturbed.tsv")
    save_corpus(corpus, target)
    _write_json(target.with_name(target.name + ".spec.json"),
                {"source": str(src), "noise": args.noise, "sparsity": args.sparsity,
                 "seed": args.seed, "users_written": len(corpus)})
    print(target)
    return EXIT_OK


def _trim_log(path: Path, keep_steps: int) -> None:
    if not path.exists():
        return
    kept = [line for line in path.read_text(encoding="utf-8").splitlines()
            if line and json.loads(line)["step"] <= keep_steps]
    path.write_text("".join(line + "\n" for line in kept), encoding="utf-8")


def cmd_train(args) -> int:
    from .checkpoint import load_checkpoint, save_checkpoint
    from .evaluation import evaluate
    from .training import train

    out = out_dir(args)
    resume = best = None
    if args.resume:
        resume = load_checkpoint(_require(args.resume))
        cfg = resolve_config(args, base=resume.cfg)
        resume.cfg = cfg
        best_path = Path(args.resume).with_name(CKPT_BEST)
        best = load_checkpoint(best_path) if best_path.is_file() else None
    else:
        cfg = resolve_config(args)

    corpus, (train_view, valid_view, test_view) = _split_views(args.data, cfg.max_len)
    if resume is not None:
        _check_items(resume, corpus)

    log_path = out / TRAIN_LOG
    if resume is not None:
        _trim_log(log_path, resume.step_count)
    else:
        log_path.write_text("", encoding="utf-8")

    last_best = [best]
    with log_path.open("a", encoding="utf-8", newline="\n") as fh:
        def on_step(rec):
            fh.write(json.dumps(rec, sort_keys=True) + "\n")

        def on_epoch(result):
            fh.flush()
            save_checkpoint(result.state, out / CKPT_LAST)
            if result.best is not last_best[0]:
                save_checkpoint(result.best, out / CKPT_BEST)
                last_best[0] = result.best

        result = train(train_view, cfg, valid_view, resume=resume, resume_best=best,
                       stop_after_epochs=args.stop_after, on_step=on_step, on_epoch=on_epoch)

    save_checkpoint(result.state, out / CKPT_LAST)
    save_checkpoint(result.best, out / CKPT_BEST)
    report = evaluate(result.best, test_view, cfg.k_list, seeds=cfg.eval_seeds,
                      seed=derive_seed(cfg.seed, _TEST_STREAM), exclude_seen=cfg.exclude_seen)
    prog = result.state.progress
    _write_json(out / METRICS, {
        "test": report.to_dict(),
        "best_valid_hr": prog["best_score"],
        "best_epoch": prog["best_epoch"],
        "epochs": prog["epoch"],
        "steps": result.state.step_count,
        "config": cfg.to_flat(),
    })
    print(report.to_json())
    return EXIT_OK


def cmd_eval(args) -> int:
    from .evaluation import evaluate

    state = _load_state(args)
    cfg = resolve_config(args, base=state.cfg)
    corpus, (_, valid_view, test_view) = _split_views(args.data, state.cfg.max_len)
    _check_items(state, corpus)
    view = test_view if args.split == "test" else valid_view
    report = evaluate(state, view, cfg.k_list, seeds=cfg.eval_seeds, seed=cfg.seed,
                      lambda_q=cfg.lambda_q, exclude_seen=cfg.exclude_seen)
    text = report.to_json()
    (out_dir(args) / f"eval_{args.split}.json").write_text(text + "\n", encoding="utf-8")
    print(text)
    return EXIT_OK


def cmd_predict(args) -> int:
    from .inference import generate_next_item, rank_items

    state = _load_state(args)
    corpus = load_corpus(_require(args.data), state.cfg.max_len)
    _check_items(state, corpus)
    raw = corpus.labels["raw_item"]
    by_user = {s.user: s for s in corpus.sequences}
    users = args.user or sorted(by_user)
    missing = [u for u in users if u not in by_user]
    if missing:
        raise UsageError(f"unknown user(s): {missing}")
    lambda_q = state.cfg.lambda_q if args.lambda_q is None else args.lambda_q
    sched = state.schedule()
    lines = []
    for user in users:
        seq = by_user[user]
        # condition on the whole observed sequence
        trace = generate_next_item(state, UserSequence(user, seq.items()), sched, lambda_q,
                                   derive_seed(args.seed, user))
        exclude = seq.items() if args.exclude_seen else ()
        items, scores = rank_items(trace.x0, state.model.item_emb, args.k, exclude,
                                   with_scores=True)
        for rank, (item, score) in enumerate(zip(items, scores), start=1):
            lines.append(f"{user}\t{rank}\t{raw[item]}\t{score!r}")
    text = "".join(line + "\n" for line in lines)
    (out_dir(args) / "predictions.tsv").write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return EXIT_OK


def cmd_variance_check(args) -> int:
    from .evaluation import variance_oracle

    probe = variance_oracle(args.lambda_q, args.group_size, args.dist, trials=args.trials,
                            samples_per_trial=args.samples, seed=args.seed)
    d = probe.to_dict()
    summary = {k: d[k] for k in ("lambda_q", "group_size", "distribution", "mean",
                                 "second_moment", "threshold", "threshold_met",
                                 "reduction_rate", "exact_ratio")}
    summary["mean_var_ratio"] = sum(t / s for s, t in zip(probe.var_s, probe.var_s_tilde)) \
        / len(probe.var_s)
    summary["mean_s_tilde"] = sum(probe.mean_s_tilde) / len(probe.mean_s_tilde)
    summary["expected_mean_s_tilde"] = (1 + args.lambda_q) * probe.mean
    _write_json(out_dir(args) / "variance_check.json", {**summary, "trials": {
        "var_s": probe.var_s, "var_s_tilde": probe.var_s_tilde}})
    print(json.dumps(summary, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_inspect_codebook(args) -> int:
    from .evaluation import codebook_diagnostics

    state = _load_state(args)
    corpus = None
    if args.data:
        corpus = load_corpus(_require(args.data), state.cfg.max_len)
        _check_items(state, corpus)
    report = codebook_diagnostics(state, corpus)
    _write_json(out_dir(args) / "codebook.json", report)
    print(json.dumps({k: v for k, v in report.items() if k != "pairwise_distance"},
                     indent=2, sort_keys=True))
    return EXIT_OK


def cmd_export_embeddings(args) -> int:
    from .evaluation import export_embeddings

    state = _load_state(args)
    corpus, (_, _, test_view) = _split_views(args.data, state.cfg.max_len)
    _check_items(state, corpus)
    path = export_embeddings(state, test_view, out_dir(args) / EMBEDDINGS, seed=args.seed)
    print(path)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="diqdiff", allow_abbrev=False,
        formatter_class=argparse.RawDescriptionHelpFormatter,
        description="Diffusion next-item recommender with quantized guidance.",
        epilog=_config_help())
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, fn, help_text, *, checkpoint=False, data=None):
        p = sub.add_parser(name, help=help_text, description=help_text, allow_abbrev=False)
        p.set_defaults(fn=fn)
        p.add_argument("--out-dir", help="output directory (default: $DIQDIFF_OUT_DIR or .)")
        if checkpoint:
            p.add_argument("--checkpoint", help=f"checkpoint file (default: OUT_DIR/{CKPT_BEST})")
        if data is not None:
            p.add_argument("--data", required=data, help="interaction file user<TAB>item<TAB>time")
        return p

    p = command("synth", cmd_synth, "write a cluster-structured synthetic corpus")
    p.add_argument("--users", type=int, default=256)
    p.add_argument("--items", type=int, default=64)
    p.add_argument("--clusters", type=int, default=8)
    p.add_argument("--seq-len-min", type=int, default=8)
    p.add_argument("--seq-len-max", type=int, default=16)
    p.add_argument("--noise", type=float, default=0.0, help="off-cluster draw probability")
    p.add_argument("--sparsity", type=float, default=0.0, help="per-item deletion probability")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="output file (default: OUT_DIR/synthetic.tsv)")

    p = command("perturb", cmd_perturb, "inject item noise, then deletions, into a corpus",
                data=True)
    p.add_argument("--noise", type=float, default=0.0, help="item replacement probability")
    p.add_argument("--sparsity", type=float, default=0.0, help="per-item deletion probability")
    p.add_argument("--seed", type=int, default=0, dest="seed")
    p.add_argument("--out", help="output file (default: OUT_DIR/<stem>.perturbed.tsv)")

    p = command("train", cmd_train, "train, early-stop on validation, report test metrics",
                data=True)
    p.add_argument("--resume", help=f"continue from a {CKPT_LAST} written by a previous run")
    p.add_argument("--stop-after", type=int, help="stop after this many epochs (for testing)")
    add_config_flags(p)
    p.formatter_class = argparse.RawDescriptionHelpFormatter
    p.epilog = _config_help()

    p = command("eval", cmd_eval, "HR@K / NDCG@K of a checkpoint", checkpoint=True, data=True)
    p.add_argument("--split", choices=("test", "valid"), default="test")
    p.add_argument("--ks", dest="cfg_ks", default=argparse.SUPPRESS)
    p.add_argument("--eval-seeds", dest="cfg_eval_seeds", default=argparse.SUPPRESS)
    p.add_argument("--exclude-seen", dest="cfg_exclude_seen",
                   action=argparse.BooleanOptionalAction, default=argparse.SUPPRESS)
    p.add_argument("--lambda-q", dest="cfg_lambda_q", default=argparse.SUPPRESS)
    p.add_argument("--seed", dest="cfg_seed", default=argparse.SUPPRESS)

    p = command("predict", cmd_predict, "top-K next items per user", checkpoint=True,
                data=True)
    p.add_argument("--user", type=int, action="append", help="user id (repeatable; default all)")
    p.add_argument("--k", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--lambda-q", type=float)
    p.add_argument("--exclude-seen", action="store_true")

    p = command("variance-check", cmd_variance_check,
                "Monte Carlo variance of the quantized guidance vs the raw embedding")
    p.add_argument("--lambda-q", type=float, default=DEFAULTS.lambda_q)
    p.add_argument("--group-size", type=int, default=4)
    p.add_argument("--dist", default="lognormal:0,0.5",
                   help="lognormal:mu,sigma | normal:mu,sigma | exponential:scale | uniform:a,b")
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--samples", type=int, default=10_000)
    p.add_argument("--seed", type=int, default=0)

    p = command("inspect-codebook", cmd_inspect_codebook,
                "code usage, distances and assignment entropy", checkpoint=True, data=False)

    p = command("export-embeddings", cmd_export_embeddings,
                f"write generated next-item vectors to OUT_DIR/{EMBEDDINGS}",
                checkpoint=True, data=True)
    p.add_argument("--seed", type=int, default=0)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except NumericalFailure as exc:
        print(f"diqdiff: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (FileNotFoundError, CheckpointError) as exc:
        print(f"diqdiff: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (UsageError, ConfigError, DiQDiffError, ValueError) as exc:
        print(f"diqdiff: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
