"""Command-line entry point.

Subcommands: gen-data, train, adapt, eval, compare, gradcheck. All run
configuration lives in JSON files validated against the schemas shipped in
tsadapt/schemas; flags only select files and override seed/paths, so a run
is fully described by its config.

Seed priority: --seed flag, then the config's seed, then $DISTILL_SEED,
then the built-in default. Exit codes: 0 success, 1 validation error,
2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict
from importlib import resources
from pathlib import Path

import jsonschema

from .checkpoint import CheckpointError, file_hash
from .compare import CompareConfig, run_compare
from .data import CorpusSpec, corruption_distance, gen_corpus, load_corpus, save_corpus, split_corpus
from .errors import ConfigError, DivergenceError
from .evaluate import corpus_ter, relative_reduction
from .gradcheck import run_gradcheck
from .model import AedConfig, AedModel, load_model, save_model
from .train import (
    ParallelFrames,
    TrainConfig,
    adapt_seq_ts,
    adapt_supervised,
    adapt_token_ts,
    clone_student,
    dev_eval_pairs,
    labeled_pairs,
)
from .train import train_ce as _train_ce


def _load_schema(name: str) -> dict:
    with resources.files("tsadapt.schemas").joinpath(name).open() as fh:
        return json.load(fh)


def _load_config(path: str, schema_name: str) -> dict:
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}")
    try:
        jsonschema.validate(raw, _load_schema(schema_name))
    except jsonschema.ValidationError as exc:
        raise ConfigError(f"{path}: {exc.message} (at {'/'.join(str(p) for p in exc.absolute_path)})")
    return raw


def _resolve_seed(flag_seed: int | None, cfg: dict) -> int | None:
    if flag_seed is not None:
        return flag_seed
    if "seed" in cfg:
        return int(cfg["seed"])
    env = os.environ.get("DISTILL_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"DISTILL_SEED must be an integer, got {env!r}")
    return None


def _train_config(raw: dict, seed_flag: int | None) -> TrainConfig:
    raw = dict(raw)
    if "lambda" in raw:
        raw["lam"] = raw.pop("lambda")
    seed = _resolve_seed(seed_flag, raw)
    if seed is not None:
        raw["seed"] = seed
    cfg = TrainConfig(**raw)
    cfg.validate()
    return cfg


def _drop_ids(vocab) -> set[int]:
    return {vocab.sos_id, vocab.eos_id, vocab.space_id}


# -- subcommands ---------------------------------------------------------------


def cmd_gen_data(args) -> int:
    raw = _load_config(args.spec, "corpus_spec.schema.json")
    raw.pop("version", None)
    for key in ("token_len_range", "frames_per_token_range", "channel_taps", "split_fractions"):
        if key in raw:
            raw[key] = tuple(raw[key])
    spec = CorpusSpec(**raw)
    spec.validate()
    corpus = gen_corpus(spec)
    splits = split_corpus(corpus, spec.split_fractions, seed=spec.seed)
    save_corpus(splits, args.out)
    total_frames = sum(u.x_clean.shape[0] for u in corpus.utterances)
    print(f"corpus: {len(corpus)} utterances, {total_frames} frames, vocab {len(corpus.vocab)}")
    print("splits: " + ", ".join(f"{k}={len(v)}" for k, v in splits.items()))
    print(f"mean clean/corrupt frame distance: {corruption_distance(corpus):.4f}")
    return 0


def cmd_train(args) -> int:
    raw = _load_config(args.config, "train_config.schema.json")
    _, vocab, splits = load_corpus(raw["corpus_dir"])
    split = raw.get("split", "train")
    side = raw.get("side", "clean")
    cfg = _train_config({"mode": "CE", **raw.get("train", {})}, args.seed)
    out_dir = Path(raw["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)

    if raw.get("init_from"):
        model, _ = load_model(raw["init_from"])
    else:
        spec, _, _ = load_corpus(raw["corpus_dir"])
        mcfg = dict(vocab_size=len(vocab), d_in=spec.d_in, sos_id=vocab.sos_id, eos_id=vocab.eos_id)
        mcfg.update(raw.get("model", {}))
        model = AedModel(AedConfig(**mcfg), seed=cfg.seed)

    metrics = _train_ce(
        model,
        labeled_pairs(splits[split], side),
        dev_eval_pairs(splits["dev"], side),
        cfg,
        drop_ids=_drop_ids(vocab),
    )
    save_model(model, out_dir / "model.adtn", vocab_meta={"tokens": vocab.tokens})
    metrics.save(out_dir)
    print(f"trained CE model on {split}/{side}: best dev TER {metrics.best_dev_ter:.4f} (epoch {metrics.best_epoch})")
    return 0


def cmd_adapt(args) -> int:
    raw = _load_config(args.config, "adapt_config.schema.json")
    _, vocab, splits = load_corpus(raw["corpus_dir"])
    split = raw.get("split", "adapt")
    cfg = _train_config(raw["train"], args.seed)
    out_dir = Path(raw["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)

    teacher, _ = load_model(args.teacher)
    teacher.set_trainable(False)
    hash_before = file_hash(args.teacher)
    if args.student_init:
        student, _ = load_model(args.student_init)
    else:
        student = clone_student(teacher)
    drop = _drop_ids(vocab)
    dev_pairs = dev_eval_pairs(splits["dev"], "corrupt")

    if cfg.mode == "TOKEN_TS":
        metrics = adapt_token_ts(teacher, student, ParallelFrames.from_corpus(splits[split]), dev_pairs, cfg, drop)
    elif cfg.mode == "SEQ_TS":
        metrics = adapt_seq_ts(teacher, student, ParallelFrames.from_corpus(splits[split]), dev_pairs, cfg, drop)
    else:
        metrics = adapt_supervised(teacher, student, splits[split].utterances, dev_pairs, cfg, drop)

    metrics.notes["teacher_hash_unchanged"] = file_hash(args.teacher) == hash_before
    save_model(student, out_dir / "student.adtn", vocab_meta={"tokens": vocab.tokens})
    metrics.save(out_dir)
    print(
        f"adapted ({cfg.mode}): best dev TER {metrics.best_dev_ter:.4f}, "
        f"teacher-hash-unchanged={metrics.notes['teacher_hash_unchanged']}"
    )
    return 0


def cmd_eval(args) -> int:
    model, _ = load_model(args.model)
    _, _, splits = load_corpus(args.corpus)
    if args.split not in splits:
        raise ConfigError(f"split {args.split!r} not in corpus (has {sorted(splits)})")
    result = corpus_ter(model, splits[args.split], args.side, keep_per_utt=bool(args.out))
    print(
        f"TER[{args.split}/{args.side}] = {result.ter:.4f} "
        f"(S={result.counts.sub} I={result.counts.ins} D={result.counts.dele} / {result.ref_tokens} ref tokens)"
    )
    if args.baseline_ter is not None:
        rr = relative_reduction(args.baseline_ter, result.ter)
        print(f"relative reduction vs baseline {args.baseline_ter:.4f}: " + (f"{rr:.1f}%" if rr is not None else "n/a"))
    if args.out:
        payload = {
            "ter": result.ter,
            "sub": result.counts.sub,
            "ins": result.counts.ins,
            "del": result.counts.dele,
            "ref_tokens": result.ref_tokens,
            "per_utt": result.per_utt,
        }
        Path(args.out).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return 0


def cmd_compare(args) -> int:
    raw = _load_config(args.config, "compare_config.schema.json")
    raw.pop("version", None)
    for key in ("seeds", "its_weights", "ats_lambdas"):
        if key in raw:
            raw[key] = tuple(raw[key])
    cfg = CompareConfig(**raw)
    report = run_compare(cfg)
    print(f"{'method':<16s} {'TER':>8s} {'WERR%':>8s} {'seeds':>6s}")
    for row in report["table"]:
        werr = f"{row['werr_pct']:.1f}" if row.get("werr_pct") is not None else "n/a"
        print(f"{row['method']:<16s} {row['ter']:>8.4f} {werr:>8s} {row['n_seeds']:>6d}")
    ordering = report["orderings"]
    print(
        "orderings: token<unadapted {a}/{n}, token<=seq {b}/{n}, ats<=token {c}/{n}, "
        "ats<=its&cts {d}/{n}".format(
            a=ordering["token_beats_unadapted"],
            b=ordering["token_le_seq"],
            c=ordering["ats_le_token"],
            d=ordering["ats_le_its_and_cts"],
            n=ordering["n_complete_seeds"],
        )
    )
    if report["failures"]:
        print(f"failures: {len(report['failures'])} cell(s), see compare_report.json", file=sys.stderr)
        return 2
    print(f"total wall time: {report['wall_time_s']:.1f}s")
    return 0


def cmd_gradcheck(args) -> int:
    report = run_gradcheck(seed=args.seed if args.seed is not None else 0)
    for line in report.lines():
        print(line)
    return 0 if report.passed else 2


# -- argument parsing -------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tsadapt", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic parallel corpus")
    g.add_argument("--spec", required=True, help="corpus spec JSON")
    g.add_argument("--out", required=True, help="output corpus directory")
    g.set_defaults(fn=cmd_gen_data)

    t = sub.add_parser("train", help="train a CE model on one side of the corpus")
    t.add_argument("--config", required=True)
    t.add_argument("--seed", type=int, default=None)
    t.set_defaults(fn=cmd_train)

    a = sub.add_parser("adapt", help="adapt a student from a frozen teacher")
    a.add_argument("--config", required=True)
    a.add_argument("--teacher", required=True, help="teacher checkpoint (.adtn)")
    a.add_argument("--student-init", default=None, help="optional student init checkpoint")
    a.add_argument("--seed", type=int, default=None)
    a.set_defaults(fn=cmd_adapt)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a corpus split")
    e.add_argument("--model", required=True)
    e.add_argument("--corpus", required=True)
    e.add_argument("--split", default="test")
    e.add_argument("--side", choices=["clean", "corrupt"], default="corrupt")
    e.add_argument("--baseline-ter", type=float, default=None)
    e.add_argument("--out", default=None, help="optional per-utterance JSON report")
    e.set_defaults(fn=cmd_eval)

    c = sub.add_parser("compare", help="run the full method-comparison grid")
    c.add_argument("--config", required=True)
    c.set_defaults(fn=cmd_compare)

    gc = sub.add_parser("gradcheck", help="finite-difference check of every op, loss and a micro model")
    gc.add_argument("--seed", type=int, default=None)
    gc.set_defaults(fn=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, CheckpointError, FileNotFoundError, NotADirectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except DivergenceError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure
        print(f"failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
