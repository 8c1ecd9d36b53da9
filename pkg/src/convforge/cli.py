"""Command line entry point: ``convforge <subcommand> ...``.

Exit codes: 0 on success, 2 on validation errors (bad input files, configs or
flags), 1 on runtime failures.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .corpus import SPLITS, anonymize, compute_stats, load_dataset, save_dataset, write_jsonl
from .errors import DataError
from .generators import GeneratedConversation
from .harness import (
    BACKENDS,
    TRACE_FILE,
    AugmentationPlan,
    Method,
    evaluate_summarizer,
    generate_for,
    load_config_file,
    resolve_settings,
    run_augmentation,
    run_oversampling_baseline,
    source_id,
    train_generator,
    train_rl_generator,
    train_summarizer,
)
from .lmbridge import CausalLM, Seq2SeqLM, load_model
from .metrics import evaluate_conversations, evaluate_summaries
from .synthetic import synthetic_records

log = logging.getLogger("convforge")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=None, help="global seed (default: config file or 0)")
    p.add_argument("--backend", choices=BACKENDS, default="tiny")
    p.add_argument("--config", type=Path, default=None, help="JSON or YAML config file")
    p.add_argument("-v", "--verbose", action="store_true")


def _train_flags(p: argparse.ArgumentParser, section: str) -> None:
    p.add_argument("--epochs", type=int, dest=f"{section}.epochs")
    p.add_argument("--lr", type=float, dest=f"{section}.learning_rate")
    p.add_argument("--batch-size", type=int, dest=f"{section}.batch_size")


def _sampling_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--top-p", type=float, dest="sampling.top_p")
    p.add_argument("--top-k", type=int, dest="sampling.top_k")
    p.add_argument("--min-length", type=int, dest="sampling.min_length")
    p.add_argument("--max-length", type=int, dest="sampling.max_length")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="convforge", description="Summary-grounded conversation generation for augmentation.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", help="load, anonymize and write a JSONL dataset")
    p.add_argument("--input", type=Path, required=True)
    p.add_argument("--output", type=Path, required=True)
    p.add_argument("--split", choices=SPLITS, default="train")
    p.add_argument("--allow-missing-conversation", action="store_true")
    _common(p)

    p = sub.add_parser("synth", help="write a template-based synthetic dataset")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--split", choices=SPLITS, default="train")
    p.add_argument("--output", type=Path, required=True)
    _common(p)

    for name, helptext in (("train-sl", "fine-tune the whole-conversation generator"), ("train-cn", "fine-tune the controlled turn-level generator")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--train", type=Path, required=True)
        p.add_argument("--output", type=Path, required=True)
        _train_flags(p, "generator")
        _common(p)

    p = sub.add_parser("train-summarizer", help="fine-tune the summarizer")
    p.add_argument("--train", type=Path, required=True)
    p.add_argument("--output", type=Path, required=True)
    _train_flags(p, "summarizer")
    _common(p)

    p = sub.add_parser("train-rl", help="PPO fine-tuning of an SL generator against a summarizer reward")
    p.add_argument("--policy", type=Path, required=True, help="trained SL generator directory")
    p.add_argument("--summarizer", type=Path, required=True)
    p.add_argument("--train", type=Path, required=True, help="dataset whose summaries drive the rollouts")
    p.add_argument("--output", type=Path, required=True)
    p.add_argument("--steps", type=int, dest="ppo.steps")
    p.add_argument("--lr", type=float, dest="ppo.learning_rate")
    p.add_argument("--init-kl-coef", type=float, dest="ppo.init_kl_coef")
    p.add_argument("--checkpoint-every", type=int, dest="ppo.checkpoint_every")
    _sampling_flags(p)
    _common(p)

    p = sub.add_parser("generate", help="generate one conversation per summary")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--input", type=Path, required=True, help="JSONL with id and summary")
    p.add_argument("--output", type=Path, required=True)
    p.add_argument("--mode", type=str.lower, choices=["sl", "rl", "cn"], default="sl")
    _sampling_flags(p)
    _common(p)

    p = sub.add_parser("evaluate", help="score conversations or summaries against references")
    p.add_argument("target", choices=["conversations", "summaries"])
    p.add_argument("--generated", type=Path, help="generated JSONL (conversations or id/summary rows)")
    p.add_argument("--reference", type=Path, required=True)
    p.add_argument("--summarizer", type=Path, help="summarize the reference conversations with this model")
    p.add_argument("--output", type=Path, help="write the metric report JSON here")
    _common(p)

    p = sub.add_parser("augment", help="full augmentation experiment")
    p.add_argument("--train", type=Path, required=True)
    p.add_argument("--test", type=Path, required=True)
    p.add_argument("--x", type=float, dest="x_percent", help="percent of summaries used to train the generator")
    p.add_argument("--method", type=str.lower, choices=["sl", "rl", "cn"])
    p.add_argument("--baseline", action="store_true", default=None, help="also run the size-matched oversampling baseline")
    p.add_argument("--replace", action="store_true", default=None, dest="replace_mode")
    p.add_argument("--out", type=Path, required=True)
    _common(p)

    p = sub.add_parser("oversample", help="oversampling baseline only")
    p.add_argument("--train", type=Path, required=True)
    p.add_argument("--test", type=Path, required=True)
    p.add_argument("--pct", type=float, required=True)
    p.add_argument("--out", type=Path, required=True)
    _common(p)

    p = sub.add_parser("stats", help="corpus statistics")
    p.add_argument("--input", type=Path, required=True)
    p.add_argument("--json", action="store_true")
    _common(p)
    return parser


def _overrides(args: argparse.Namespace) -> dict:
    out: dict = {}
    for key, value in vars(args).items():
        if value is None or "." not in key:
            continue
        section, name = key.split(".", 1)
        out.setdefault(section, {})[name] = value
    for key in ("x_percent", "method", "baseline", "replace_mode"):
        if getattr(args, key, None) is not None:
            out[key] = getattr(args, key)
    return out


def _settings(args: argparse.Namespace):
    return resolve_settings(args.backend, load_config_file(args.config), _overrides(args), args.seed)


def _load_causal(path: Path) -> CausalLM:
    model = load_model(path)
    if not isinstance(model, CausalLM):
        raise DataError(f"{path} does not hold a causal generator")
    return model


def _load_seq2seq(path: Path) -> Seq2SeqLM:
    model = load_model(path)
    if not isinstance(model, Seq2SeqLM):
        raise DataError(f"{path} does not hold a summarizer")
    return model


def _anonymized(path: Path, split: str = "train", require_conversation: bool = True):
    return [anonymize(r)[0] for r in load_dataset(path, split, require_conversation)]


def cmd_preprocess(args) -> int:
    records = load_dataset(args.input, args.split, not args.allow_missing_conversation)
    save_dataset([anonymize(r)[0] for r in records], args.output)
    print(f"wrote {len(records)} records to {args.output}")
    return 0


def cmd_synth(args) -> int:
    settings, extras = _settings(args)
    save_dataset(synthetic_records(args.n, extras["seed"], args.split), args.output)
    print(f"wrote {args.n} synthetic records to {args.output}")
    return 0


def _train_causal(args, method: Method) -> int:
    settings, _ = _settings(args)
    model = train_generator(_anonymized(args.train), method, settings)
    model.save(args.output)
    print(f"saved {method.value} generator to {args.output}; epoch losses {[round(x, 4) for x in model.train_losses]}")
    if model.skipped_sequences:
        print(f"skipped {model.skipped_sequences} sequences with no trainable tokens")
    return 0


def cmd_train_summarizer(args) -> int:
    settings, _ = _settings(args)
    model = train_summarizer(_anonymized(args.train), settings)
    model.save(args.output)
    print(f"saved summarizer to {args.output}; epoch losses {[round(x, 4) for x in model.train_losses]}")
    return 0


def cmd_train_rl(args) -> int:
    settings, _ = _settings(args)
    policy = _load_causal(args.policy)
    summarizer = _load_seq2seq(args.summarizer)
    summaries = [r.summary for r in _anonymized(args.train, require_conversation=False)]
    policy, trace = train_rl_generator(policy, summarizer, summaries, settings, checkpoint_dir=args.output / "checkpoints")
    policy.save(args.output)
    trace.to_csv(args.output / TRACE_FILE)
    if trace.mean_reward:
        print(f"PPO steps {len(trace)}; mean reward first {trace.mean_reward[0]:.4f} last {trace.mean_reward[-1]:.4f}")
    if trace.skipped_steps:
        print(f"skipped {trace.skipped_steps} steps with only empty rollouts")
    return 0


def cmd_generate(args) -> int:
    settings, extras = _settings(args)
    model = _load_causal(args.model)
    records = _anonymized(args.input, require_conversation=False)
    generated = generate_for(model, records, Method.parse(args.mode), settings, extras["seed"])
    write_jsonl((g.to_dict() for g in generated), args.output)
    ok = sum(g.well_formed for g in generated)
    print(f"generated {len(generated)} conversations ({ok} well formed) -> {args.output}")
    return 0


def _read_generated(path: Path) -> list[dict]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rows.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from None
            if "id" not in rows[-1]:
                raise DataError(f"{path}:{lineno}: missing field: id")
    return rows


def cmd_evaluate(args) -> int:
    _settings(args)
    refs = _anonymized(args.reference, "test")
    if args.target == "conversations":
        if args.generated is None:
            raise DataError("evaluate conversations needs --generated")
        generated = [GeneratedConversation.from_dict(d) for d in _read_generated(args.generated)]
        by_id = {r.id: r.conversation for r in refs}
        if all(source_id(g.id) in by_id for g in generated):
            # pair "<id>::gen" outputs with the conversation they were generated for
            references = [replace(by_id[source_id(g.id)], id=g.id) for g in generated]
        else:
            references = [r.conversation for r in refs]
        report = evaluate_conversations(generated, references)
    elif args.summarizer is not None:
        report = evaluate_summarizer(_load_seq2seq(args.summarizer), refs)
    else:
        if args.generated is None:
            raise DataError("evaluate summaries needs --generated or --summarizer")
        rows = {str(d["id"]): d.get("summary", "") for d in _read_generated(args.generated)}
        missing = sorted({r.id for r in refs} - set(rows))
        extra = sorted(set(rows) - {r.id for r in refs})
        if missing or extra:
            raise DataError(f"ids do not match; missing in generated: {missing}, missing in reference: {extra}")
        report = evaluate_summaries([rows[r.id] for r in refs], [r.summary for r in refs])
    print(report.render())
    if args.output is not None:
        args.output.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    return 0


def cmd_augment(args) -> int:
    settings, extras = _settings(args)
    plan = AugmentationPlan(
        x_percent=float(extras.get("x_percent", 30.0)),
        method=Method.parse(extras.get("method", "cn")),
        seed=extras["seed"],
        settings=settings,
        replace_mode=bool(extras.get("replace_mode", False)),
        baseline=bool(extras.get("baseline", False)),
    )
    report = run_augmentation(load_dataset(args.train, "train"), load_dataset(args.test, "test"), plan, args.out)
    sizes = report.dataset_sizes
    print(f"original {sizes['original']} + generated {sizes['augmented'] - sizes['original']} = {sizes['augmented']}")
    print(report.summary_metrics.render())
    if report.baseline_metrics is not None:
        print("oversampling baseline:")
        print(report.baseline_metrics.render())
    print(f"split audit {'passed' if report.audit['passed'] else 'FAILED'}; report in {args.out}")
    return 0 if report.audit["passed"] else 1


def cmd_oversample(args) -> int:
    settings, extras = _settings(args)
    report = run_oversampling_baseline(
        load_dataset(args.train, "train"), load_dataset(args.test, "test"), args.pct, extras["seed"], settings, args.out
    )
    print(f"training instances {report.dataset_sizes['augmented']}")
    print(report.summary_metrics.render())
    return 0


def cmd_stats(args) -> int:
    _settings(args)
    records = load_dataset(args.input, "train")
    stats = compute_stats([r.conversation for r in records])
    if args.json:
        print(json.dumps(stats.to_dict(), sort_keys=True))
    else:
        print(f"conversations {stats.n_conversations}")
        print(f"avg_turns {stats.avg_turns:.2f} +- {stats.std_turns:.2f}")
        print(f"avg_tokens_per_turn {stats.avg_tokens_per_turn:.2f} +- {stats.std_tokens_per_turn:.2f}")
    return 0


COMMANDS = {
    "preprocess": cmd_preprocess,
    "synth": cmd_synth,
    "train-sl": lambda a: _train_causal(a, Method.SL),
    "train-cn": lambda a: _train_causal(a, Method.CN),
    "train-summarizer": cmd_train_summarizer,
    "train-rl": cmd_train_rl,
    "generate": cmd_generate,
    "evaluate": cmd_evaluate,
    "augment": cmd_augment,
    "oversample": cmd_oversample,
    "stats": cmd_stats,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return COMMANDS[args.command](args)
    except (DataError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        log.debug("runtime failure", exc_info=True)
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
