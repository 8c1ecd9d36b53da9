"""Experiment orchestration: the augmentation protocol and the oversampling baseline.

Configuration is layered: built-in defaults < backend profile < config file <
explicit overrides (CLI flags). Trained checkpoints are cached under
``$CONVFORGE_CACHE`` (or ``<out>/checkpoints``) keyed by a hash of everything
that determines them, so a repeated run reuses them.
"""

from __future__ import annotations

import enum
import hashlib
import json
import logging
import os
import random
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field, replace
from pathlib import Path

import yaml

from .corpus import SummaryRecord, anonymize, round_half_up, split_for_augmentation, write_jsonl
from .errors import DataError, GenerationError
from .generators import (
    DEFAULT_TURN_RANGE,
    GeneratedConversation,
    generate_cn,
    generate_sl,
    Mode,
    sample_inference_controls,
    summary_speakers,
)
from .lmbridge import (
    CausalLM,
    SamplingParams,
    Seq2SeqLM,
    TinyArch,
    TinyCausalLM,
    TinySeq2Seq,
    TrainConfig,
    finetune_causal,
    finetune_seq2seq,
    load_model,
)
from .metrics import MetricReport, evaluate_conversations, evaluate_summaries
from .rlloop import PPOConfig, PPOTrace, train_rl
from .seqformat import encode_sl, linearize_conversation, training_sequences_cn

log = logging.getLogger(__name__)

ENV_CACHE = "CONVFORGE_CACHE"
REPORT_FILE = "report.json"
GENERATED_FILE = "generated.jsonl"
TRACE_FILE = "trace.csv"
BACKENDS = ("tiny", "pretrained")


class Method(str, enum.Enum):
    SL = "SL"
    RL = "RL"
    CN = "CN"

    @classmethod
    def parse(cls, value: str) -> Method:
        try:
            return cls(value.upper())
        except ValueError:
            raise DataError(f"unknown method {value!r}; expected one of sl, rl, cn") from None


# --------------------------------------------------------------------------- #
# Settings and config layering
# --------------------------------------------------------------------------- #

# The defaults of every config class are the full-scale values; randomly
# initialised tiny models need far larger learning rates and fewer steps.
BACKEND_PROFILES: dict[str, dict] = {
    "pretrained": {},
    "tiny": {
        "generator": {"learning_rate": 3e-3, "epochs": 15, "batch_size": 16, "gradient_accumulation": 1, "warmup_steps": 10},
        "summarizer": {"learning_rate": 3e-3, "epochs": 15, "batch_size": 16, "gradient_accumulation": 1, "warmup_steps": 10},
        "ppo": {"steps": 40, "batch_size": 16, "forward_batch_size": 8, "learning_rate": 3e-4, "init_kl_coef": 0.01},
        "sampling": {"max_length": 160},
    },
}
SECTIONS = ("sampling", "generator", "summarizer", "ppo", "arch")
TOP_LEVEL = ("x_percent", "method", "generator_model", "summarizer_model", "cn_turn_range", "replace_mode", "baseline")


@dataclass(frozen=True)
class Settings:
    backend: str = "tiny"
    sampling: SamplingParams = SamplingParams()
    generator: TrainConfig = TrainConfig()
    summarizer: TrainConfig = TrainConfig.summarizer()
    ppo: PPOConfig = PPOConfig()
    arch: TinyArch = TinyArch()
    generator_model: str = "gpt2"
    summarizer_model: str = "sshleifer/distilbart-xsum-12-6"
    cn_turn_range: tuple[int, int] = DEFAULT_TURN_RANGE

    def to_dict(self) -> dict:
        return {
            "backend": self.backend,
            "sampling": self.sampling.to_dict(),
            "generator": self.generator.to_dict(),
            "summarizer": self.summarizer.to_dict(),
            "ppo": self.ppo.to_dict(),
            "arch": self.arch.to_dict(),
            "generator_model": self.generator_model,
            "summarizer_model": self.summarizer_model,
            "cn_turn_range": list(self.cn_turn_range),
        }


def load_config_file(path: str | Path | None) -> dict:
    """Read a JSON or YAML config file into a nested dict (empty for ``None``)."""
    if path is None:
        return {}
    path = Path(path)
    if not path.exists():
        raise DataError(f"config file not found: {path}")
    text = path.read_text()
    try:
        data = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise DataError(f"cannot parse config {path}: {exc}") from None
    data = data or {}
    if not isinstance(data, dict):
        raise DataError(f"config {path} must hold a mapping")
    unknown = set(data) - set(SECTIONS) - set(TOP_LEVEL) - {"seed", "backend"}
    if unknown:
        raise DataError(f"unknown config keys in {path}: {sorted(unknown)}")
    return data


def _merge(*layers: dict) -> dict:
    out: dict = {}
    for layer in layers:
        for key, value in layer.items():
            if key in SECTIONS and isinstance(value, dict):
                out[key] = {**out.get(key, {}), **value}
            elif value is not None:
                out[key] = value
    return out


def resolve_settings(
    backend: str = "tiny",
    file_cfg: dict | None = None,
    overrides: dict | None = None,
    seed: int | None = None,
) -> tuple[Settings, dict]:
    """Build :class:`Settings` from the layers; also return the merged top-level extras."""
    if backend not in BACKENDS:
        raise DataError(f"unknown backend {backend!r}; expected one of {BACKENDS}")
    merged = _merge(BACKEND_PROFILES[backend], file_cfg or {}, overrides or {})
    if seed is None:
        seed = int(merged.get("seed", 0))
    seeded = {"seed": seed}
    base = Settings()
    settings = Settings(
        backend=backend,
        sampling=base.sampling.updated({**merged.get("sampling", {}), **seeded}),
        generator=base.generator.updated({**merged.get("generator", {}), **seeded}),
        summarizer=base.summarizer.updated({**merged.get("summarizer", {}), **seeded}),
        ppo=base.ppo.updated({**merged.get("ppo", {}), **seeded}),
        arch=base.arch.updated(merged.get("arch", {})),
        generator_model=merged.get("generator_model", base.generator_model),
        summarizer_model=merged.get("summarizer_model", base.summarizer_model),
        cn_turn_range=tuple(merged.get("cn_turn_range", base.cn_turn_range)),
    )
    extras = {k: merged[k] for k in TOP_LEVEL if k in merged}
    extras["seed"] = seed
    return settings, extras


# --------------------------------------------------------------------------- #
# Checkpoint cache
# --------------------------------------------------------------------------- #


def cache_root(out_dir: str | Path | None) -> Path | None:
    env = os.environ.get(ENV_CACHE)
    if env:
        return Path(env)
    return Path(out_dir) / "checkpoints" if out_dir is not None else None


def _fingerprint(payload: dict) -> str:
    blob = json.dumps(payload, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def cached_model(
    root: Path | None, stage: str, key: dict, build: Callable[[], CausalLM | Seq2SeqLM]
) -> tuple[CausalLM | Seq2SeqLM, Path | None]:
    """Load ``stage`` from the cache when its fingerprint matches, else build and store it."""
    if root is None:
        return build(), None
    path = root / f"{stage}-{_fingerprint({'stage': stage, **key})}"
    if (path / "config.json").exists():
        log.info("reusing cached %s from %s", stage, path)
        model = load_model(path)
        losses = path / "losses.json"
        if losses.exists():
            model.train_losses = json.loads(losses.read_text())
        return model, path
    model = build()
    model.save(path)
    (path / "losses.json").write_text(json.dumps(model.train_losses))
    return model, path


# --------------------------------------------------------------------------- #
# Stage builders (shared with the CLI)
# --------------------------------------------------------------------------- #


def new_causal(settings: Settings, texts: Sequence[str]) -> CausalLM:
    if settings.backend == "tiny":
        return TinyCausalLM.from_texts(texts, settings.arch, max_length=settings.sampling.max_length)
    from .lmbridge.pretrained import PretrainedCausalLM

    return PretrainedCausalLM.from_pretrained(settings.generator_model, settings.sampling.max_length, settings.arch.n_speakers)


def new_seq2seq(settings: Settings, texts: Sequence[str]) -> Seq2SeqLM:
    if settings.backend == "tiny":
        return TinySeq2Seq.from_texts(texts, settings.arch)
    from .lmbridge.pretrained import PretrainedSeq2Seq

    return PretrainedSeq2Seq.from_pretrained(settings.summarizer_model, settings.arch.n_speakers)


def _require_conversations(records: Sequence[SummaryRecord], what: str) -> None:
    missing = [r.id for r in records if r.conversation is None]
    if missing:
        raise DataError(f"{what} needs conversations; missing for ids {missing[:10]}")


def train_generator(records: Sequence[SummaryRecord], method: Method, settings: Settings) -> CausalLM:
    """Fine-tune a fresh causal LM in the SL or CN format (RL starts from SL)."""
    _require_conversations(records, "generator training")
    if method == Method.CN:
        sequences = [seq for r in records for seq in training_sequences_cn(r)]
    else:
        sequences = [encode_sl(r.summary, r.conversation) for r in records]
    model = new_causal(settings, [s.text for s in sequences])
    return finetune_causal(model, sequences, settings.generator)


def summarizer_pairs(records: Sequence[SummaryRecord]) -> list[tuple[str, str]]:
    _require_conversations(records, "summarizer training")
    return [(linearize_conversation(r.conversation), r.summary) for r in records]


def train_summarizer(records: Sequence[SummaryRecord], settings: Settings) -> Seq2SeqLM:
    pairs = summarizer_pairs(records)
    model = new_seq2seq(settings, [t for pair in pairs for t in pair])
    return finetune_seq2seq(model, pairs, settings.summarizer)


def train_rl_generator(
    policy: CausalLM,
    summarizer: Seq2SeqLM,
    summaries: Sequence[str],
    settings: Settings,
    checkpoint_dir: str | Path | None = None,
) -> tuple[CausalLM, PPOTrace]:
    reference = policy.clone().freeze()
    return train_rl(policy, reference, summarizer, summaries, settings.ppo, settings.sampling, checkpoint_dir=checkpoint_dir)


def generate_for(
    model: CausalLM,
    records: Sequence[SummaryRecord],
    method: Method,
    settings: Settings,
    seed: int,
    samples_per_summary: int = 1,
) -> list[GeneratedConversation]:
    """One (or ``samples_per_summary``) generated conversation per record, with derived seeds."""
    out = []
    for i, rec in enumerate(records):
        for k in range(samples_per_summary):
            sample_seed = (seed * 1_000_003 + i) * 101 + k
            conv_id = f"{rec.id}::gen" if samples_per_summary == 1 else f"{rec.id}::gen{k}"
            params = replace(settings.sampling, seed=sample_seed)
            if method == Method.CN:
                controls = sample_inference_controls(
                    settings.cn_turn_range, summary_speakers(rec.summary), seed=sample_seed
                )
                out.append(generate_cn(model, rec.summary, controls, params, conv_id))
            else:
                mode = Mode.RL_POLICY if method == Method.RL else Mode.SL
                out.append(generate_sl(model, rec.summary, params, conv_id, mode=mode))
    return out


def source_id(conv_id: str) -> str:
    return conv_id.split("::gen", 1)[0]


def evaluate_summarizer(model: Seq2SeqLM, test: Sequence[SummaryRecord]) -> MetricReport:
    _require_conversations(test, "evaluation")
    predictions = [model.summarize(linearize_conversation(r.conversation)) for r in test]
    return evaluate_summaries(predictions, [r.summary for r in test])


# --------------------------------------------------------------------------- #
# Plans and reports
# --------------------------------------------------------------------------- #


@dataclass(frozen=True)
class AugmentationPlan:
    x_percent: float = 30.0
    method: Method = Method.CN
    seed: int = 0
    settings: Settings = Settings()
    # append: holdout summaries appear twice; replace: generated conversation only
    replace_mode: bool = False
    samples_per_summary: int = 1
    baseline: bool = False

    def __post_init__(self) -> None:
        if not 0 < self.x_percent < 100:
            raise DataError(f"x_percent must lie in (0, 100), got {self.x_percent}")
        if self.samples_per_summary < 1:
            raise DataError("samples_per_summary must be >= 1")
        if self.replace_mode and self.samples_per_summary != 1:
            raise DataError("replace mode needs exactly one sample per summary")

    @property
    def generator_params(self) -> SamplingParams:
        return self.settings.sampling

    @property
    def summarizer_cfg(self) -> TrainConfig:
        return self.settings.summarizer

    def to_dict(self) -> dict:
        return {
            "x_percent": self.x_percent,
            "method": self.method.value,
            "seed": self.seed,
            "replace_mode": self.replace_mode,
            "samples_per_summary": self.samples_per_summary,
            "baseline": self.baseline,
            "settings": self.settings.to_dict(),
        }


@dataclass
class ExperimentReport:
    plan: dict
    dataset_sizes: dict[str, int]
    summary_metrics: MetricReport
    baseline_metrics: MetricReport | None = None
    artifacts: dict[str, str | None] = field(default_factory=dict)
    audit: dict = field(default_factory=dict)
    generation: dict = field(default_factory=dict)
    losses: dict[str, list[float]] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "plan": self.plan,
            "dataset_sizes": self.dataset_sizes,
            "summary_metrics": self.summary_metrics.to_dict(),
            "baseline_metrics": self.baseline_metrics.to_dict() if self.baseline_metrics else None,
            "artifacts": self.artifacts,
            "audit": self.audit,
            "generation": self.generation,
            "losses": self.losses,
        }

    def save(self, out_dir: str | Path) -> Path:
        path = Path(out_dir) / REPORT_FILE
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        return path


def _ids(records) -> set[str]:
    return {r.id for r in records}


def audit_splits(
    gen_train: Sequence[SummaryRecord],
    holdout: Sequence[SummaryRecord],
    generated: Sequence[GeneratedConversation],
    summarizer_train: Sequence[SummaryRecord],
    test: Sequence[SummaryRecord],
) -> dict:
    """Id-level split hygiene checks; ``passed`` is the conjunction."""
    holdout_ids = _ids(holdout)
    test_ids = _ids(test)
    training_ids = _ids(gen_train) | {source_id(r.id) for r in summarizer_train}
    checks = {
        "generator_train_holdout_disjoint": not (_ids(gen_train) & holdout_ids),
        "generated_only_for_holdout": all(source_id(g.id) in holdout_ids for g in generated),
        "test_unused_in_training": not (test_ids & training_ids),
        "test_not_generated_for": not (test_ids & {source_id(g.id) for g in generated}),
    }
    return {"passed": all(checks.values()), "checks": checks}


def _compare_with_originals(generated: Sequence[GeneratedConversation], holdout: Sequence[SummaryRecord]) -> dict | None:
    if not generated:
        return None
    by_id = {r.id: r.conversation for r in holdout}
    refs = [replace(by_id[source_id(g.id)], id=g.id) for g in generated]
    return evaluate_conversations(generated, refs).to_dict()


def _relative(path: Path | None, out_dir: Path | None) -> str | None:
    if path is None:
        return None
    if out_dir is not None:
        try:
            return str(path.resolve().relative_to(out_dir.resolve()))
        except ValueError:
            pass
    return str(path)


def _check_disjoint(train: Sequence[SummaryRecord], test: Sequence[SummaryRecord]) -> None:
    overlap = sorted(_ids(train) & _ids(test))
    if overlap:
        raise DataError(f"train and test splits share ids: {overlap[:10]}")
    _require_conversations(train, "augmentation")
    _require_conversations(test, "evaluation")


def _prepare(records: Sequence[SummaryRecord]) -> list[SummaryRecord]:
    return [anonymize(r)[0] for r in records]


def run_augmentation(
    records: Sequence[SummaryRecord],
    test: Sequence[SummaryRecord],
    plan: AugmentationPlan,
    out_dir: str | Path | None = None,
) -> ExperimentReport:
    """Split by x, train a generator on the x side, generate for the holdout,
    train a summarizer on the augmented set and evaluate it on ``test``."""
    records, test = _prepare(records), _prepare(test)
    _check_disjoint(records, test)
    out = Path(out_dir) if out_dir is not None else None
    root = cache_root(out)
    settings = plan.settings
    gen_train, holdout = split_for_augmentation(records, plan.x_percent, plan.seed)
    gen_ids = sorted(_ids(gen_train))
    sl_method = Method.SL if plan.method == Method.RL else plan.method

    generator, gen_path = cached_model(
        root,
        f"generator-{sl_method.value.lower()}",
        {"settings": settings.to_dict(), "method": sl_method.value, "ids": gen_ids},
        lambda: train_generator(gen_train, sl_method, settings),
    )
    losses = {"generator": list(generator.train_losses)}
    artifacts: dict[str, str | None] = {"generator": _relative(gen_path, out)}
    trace = None
    if plan.method == Method.RL:
        reward_model, reward_path = cached_model(
            root,
            "reward-summarizer",
            {"settings": settings.to_dict(), "ids": gen_ids},
            lambda: train_summarizer(gen_train, settings),
        )
        losses["reward_summarizer"] = list(reward_model.train_losses)
        artifacts["reward_summarizer"] = _relative(reward_path, out)
        generator, trace = train_rl_generator(generator, reward_model, [r.summary for r in gen_train], settings)

    generated = generate_for(generator, holdout, plan.method, settings, plan.seed, plan.samples_per_summary)
    n_ok = sum(g.well_formed and bool(g.conversation.turns) for g in generated)
    if n_ok == 0:
        sample = generated[0].raw_text[:200] if generated else ""
        raise GenerationError(f"generator produced 0 well-formed conversations out of {len(generated)}; first raw output: {sample!r}")
    usable = [g for g in generated if g.conversation.turns]
    synthetic = [
        SummaryRecord(g.id, g.summary, g.conversation, "train") for g in usable
    ]
    if plan.replace_mode:
        by_source = {source_id(s.id): s for s in synthetic}
        augmented = [by_source.get(r.id, r) for r in records]
    else:
        augmented = [*records, *synthetic]
    log.info("augmented train set: %d original + %d generated", len(records), len(synthetic))

    summarizer, sum_path = cached_model(
        root,
        "summarizer",
        {
            "settings": settings.to_dict(),
            "pairs": _fingerprint({"pairs": summarizer_pairs(augmented)}),
        },
        lambda: train_summarizer(augmented, settings),
    )
    losses["summarizer"] = list(summarizer.train_losses)
    artifacts["summarizer"] = _relative(sum_path, out)
    metrics = evaluate_summarizer(summarizer, test)

    baseline = None
    if plan.baseline:
        baseline_report = _oversample(records, test, len(synthetic), plan.seed, settings, root, out)
        baseline = baseline_report.summary_metrics
        artifacts["baseline_summarizer"] = baseline_report.artifacts.get("summarizer")

    generation = {
        "n_generated": len(generated),
        "n_well_formed": n_ok,
        "n_fallback_turns": sum(g.n_fallbacks for g in generated),
        "vs_original": _compare_with_originals(usable, holdout) if plan.samples_per_summary == 1 else None,
    }
    report = ExperimentReport(
        plan=plan.to_dict(),
        dataset_sizes={
            "original": len(records),
            "generator_train": len(gen_train),
            "holdout": len(holdout),
            "augmented": len(augmented),
            "test": len(test),
        },
        summary_metrics=metrics,
        baseline_metrics=baseline,
        artifacts=artifacts,
        audit=audit_splits(gen_train, holdout, generated, augmented, test),
        generation=generation,
        losses=losses,
    )
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        write_jsonl((g.to_dict() for g in generated), out / GENERATED_FILE)
        report.artifacts["generated"] = GENERATED_FILE
        if trace is not None:
            trace.to_csv(out / TRACE_FILE)
            report.artifacts["trace"] = TRACE_FILE
        report.save(out)
    return report


def oversample_count(n_train: int, pct: float) -> int:
    return round_half_up(pct * n_train / 100)


def _oversample(
    records: Sequence[SummaryRecord],
    test: Sequence[SummaryRecord],
    count: int,
    seed: int,
    settings: Settings,
    root: Path | None,
    out: Path | None,
) -> ExperimentReport:
    if count < 1:
        raise DataError("oversampling would duplicate no records")
    rng = random.Random(seed)
    n = len(records)
    picks = rng.sample(range(n), count) if count <= n else [rng.randrange(n) for _ in range(count)]
    duplicates = [replace(records[i], id=f"{records[i].id}::dup{j}") for j, i in enumerate(picks)]
    train = [*records, *duplicates]
    summarizer, path = cached_model(
        root,
        "summarizer",
        {"settings": settings.to_dict(), "pairs": _fingerprint({"pairs": summarizer_pairs(train)})},
        lambda: train_summarizer(train, settings),
    )
    audit = {"passed": not (_ids(test) & _ids(records)), "checks": {"test_unused_in_training": not (_ids(test) & _ids(records))}}
    return ExperimentReport(
        plan={"method": "oversample", "pct": 100 * count / n, "seed": seed, "settings": settings.to_dict()},
        dataset_sizes={"original": n, "augmented": len(train), "test": len(test)},
        summary_metrics=evaluate_summarizer(summarizer, test),
        artifacts={"summarizer": _relative(path, out)},
        audit=audit,
        losses={"summarizer": list(summarizer.train_losses)},
    )


def run_oversampling_baseline(
    records: Sequence[SummaryRecord],
    test: Sequence[SummaryRecord],
    pct: float,
    seed: int = 0,
    settings: Settings = Settings(),
    out_dir: str | Path | None = None,
) -> ExperimentReport:
    """Duplicate ``round(pct/100 * |train|)`` uniformly chosen pairs, train and evaluate."""
    if pct <= 0:
        raise DataError(f"pct must be positive, got {pct}")
    records, test = _prepare(records), _prepare(test)
    _check_disjoint(records, test)
    out = Path(out_dir) if out_dir is not None else None
    report = _oversample(records, test, oversample_count(len(records), pct), seed, settings, cache_root(out), out)
    report.plan["pct"] = pct
    if out is not None:
        report.save(out)
    return report
