"""Command-line entry point.

Subcommands: train, finetune, predict, evaluate, sample, gradcheck,
dump-embeddings.  Configuration comes from a JSON file (--config), overridden
by repeatable --set key=value flags and then by the dedicated flags (--seed,
--out, --jobs).  Every run writes a resolved-config snapshot to the output
directory so it can be reproduced bit-exactly from the snapshot alone.

Exit codes: 0 success, 2 usage or configuration error, 3 data error
(unreadable corpora, label maps, checkpoints), 4 numeric error (non-finite
losses or gradients, failed gradient check).  Log verbosity is controlled by
the FEWTAG_LOG_LEVEL environment variable (DEBUG, INFO, WARNING, ...).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import fields

from .autodiff import NumericError
from .data import (DataError, LabelSet, Sentence, greedy_sample_support,
                   load_label_map, read_conll, read_fewnerd_episodes, write_conll)
from .gradcheck import run_gradcheck
from .inference import (build_support_bank, decode_sentence, dump_embeddings,
                        evaluate_episodes, low_resource_eval)
from .training import (CheckpointError, TrainConfig, finetune, load_checkpoint,
                       save_checkpoint, train_source)

log = logging.getLogger("fewtag")

EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

_TRAIN_FIELDS = {f.name for f in fields(TrainConfig)}

# full key schema with defaults; None marks optional paths/values
_DEFAULTS = {
    **{f.name: getattr(TrainConfig(), f.name) for f in fields(TrainConfig)},
    "encoder": {},            # overrides for the encoder (d, n_layers, ...)
    "protocol": "episode",    # or "low-resource"
    "n_way": 2,
    "k_shot": 1,
    "n_runs": 5,
    "strict_k": False,
    "jobs": 1,
    "gradcheck_batches": 20,
    "train_corpus": None,
    "support": None,
    "test_corpus": None,
    "episodes": None,
    "input": None,
    "label_map": None,
    "checkpoint": None,
    "out": "out",
}


class UsageError(ValueError):
    pass


def _parse_set(pairs: list[str]) -> dict:
    out: dict = {}
    for pair in pairs:
        if "=" not in pair:
            raise UsageError(f"--set expects key=value, got {pair!r}")
        key, raw = pair.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = out
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = value
    return out


def _merge(base: dict, override: dict) -> dict:
    merged = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def resolve_config(args: argparse.Namespace) -> dict:
    config = dict(_DEFAULTS)
    if args.config:
        try:
            with open(args.config, encoding="utf-8") as f:
                file_config = json.load(f)
        except FileNotFoundError:
            raise UsageError(f"config file not found: {args.config}")
        except json.JSONDecodeError as e:
            raise UsageError(f"config file {args.config} is not valid JSON: {e}")
        if not isinstance(file_config, dict):
            raise UsageError("config file must hold a JSON object")
        config = _merge(config, file_config)
    config = _merge(config, _parse_set(args.set or []))
    for flag in ("seed", "out", "jobs"):
        value = getattr(args, flag, None)
        if value is not None:
            config[flag] = value
    for key, value in vars(args).items():
        if key in _DEFAULTS and key not in ("seed", "out", "jobs") and value is not None:
            config[key] = value

    unknown = set(config) - set(_DEFAULTS)
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(sorted(unknown))}")
    if not isinstance(config["jobs"], int) or config["jobs"] < 1:
        raise UsageError("jobs must be a positive integer")
    if config["protocol"] not in ("episode", "low-resource"):
        raise UsageError(f"unknown protocol {config['protocol']!r}")
    if "alpha" in config and not 0.0 <= config["alpha"] <= 1.0:
        raise UsageError(f"alpha must be in [0, 1], got {config['alpha']}")
    return config


def train_config_from(config: dict) -> TrainConfig:
    kwargs = {k: config[k] for k in _TRAIN_FIELDS}
    if isinstance(kwargs.get("alpha_grid"), list):
        kwargs["alpha_grid"] = tuple(kwargs["alpha_grid"])
    try:
        return TrainConfig(**kwargs)
    except (TypeError, ValueError) as e:
        raise UsageError(str(e))


def _require(config: dict, command: str, *keys: str) -> None:
    missing = [k for k in keys if not config.get(k)]
    if missing:
        raise UsageError(f"{command} requires: {', '.join(missing)}")


def _snapshot(config: dict, command: str) -> None:
    os.makedirs(config["out"], exist_ok=True)
    resolved = {"command": command, **config}
    path = os.path.join(config["out"], "resolved_config.json")
    with open(path, "w", encoding="utf-8") as f:
        json.dump(resolved, f, indent=2, sort_keys=True)
    log.info("resolved config written to %s", path)


def _classes_from(sentences: list[Sentence], role: str) -> LabelSet:
    found: set[str] = set()
    for s in sentences:
        found |= s.entity_classes()
    if not found:
        raise DataError("corpus contains no entity classes")
    return LabelSet(tuple(sorted(found)), role=role)


def _out_path(config: dict, name: str) -> str:
    return os.path.join(config["out"], name)


def cmd_train(config: dict) -> int:
    _require(config, "train", "train_corpus", "label_map")
    _snapshot(config, "train")
    sentences = read_conll(config["train_corpus"])
    label_set = _classes_from(sentences, "source")
    label_map = load_label_map(config["label_map"], label_set)
    ckpt, log_entries = train_source(sentences, label_set, label_map,
                                     train_config_from(config),
                                     encoder_overrides=config["encoder"] or None)
    save_checkpoint(ckpt, _out_path(config, "checkpoint.ckpt"))
    with open(_out_path(config, "loss_log.txt"), "w", encoding="utf-8") as f:
        for entry in log_entries:
            f.write(entry.format() + "\n")
    log.info("trained on %d sentences, %d steps, final loss %.6f",
             len(sentences), len(log_entries), log_entries[-1].loss)
    return 0


def cmd_finetune(config: dict) -> int:
    _require(config, "finetune", "checkpoint", "support")
    _snapshot(config, "finetune")
    ckpt = load_checkpoint(config["checkpoint"])
    support = read_conll(config["support"])
    label_set = _classes_from(support, "target")
    label_map = (load_label_map(config["label_map"], label_set)
                 if config["label_map"] else ckpt.label_map)
    tuned, result = finetune(ckpt, support, label_set, label_map,
                             train_config_from(config))
    save_checkpoint(tuned, _out_path(config, "finetuned.ckpt"))
    with open(_out_path(config, "finetune_log.txt"), "w", encoding="utf-8") as f:
        for entry in result.log:
            f.write(entry.format() + "\n")
    log.info("fine-tuned for %d iterations (cap hit: %s)",
             result.iterations, result.hit_cap)
    return 0


def cmd_predict(config: dict) -> int:
    _require(config, "predict", "checkpoint", "support", "input")
    _snapshot(config, "predict")
    ckpt = load_checkpoint(config["checkpoint"])
    support = read_conll(config["support"])
    queries = read_conll(config["input"])
    bank = build_support_bank(ckpt, support, max_len=config["max_len"])
    tagged = [Sentence(s.tokens, tuple(decode_sentence(ckpt, s, bank,
                                                       max_len=config["max_len"])))
              for s in queries]
    path = _out_path(config, "predictions.conll")
    write_conll(tagged, path)
    log.info("tagged %d sentences into %s", len(tagged), path)
    return 0


def cmd_evaluate(config: dict) -> int:
    _require(config, "evaluate", "checkpoint")
    _snapshot(config, "evaluate")
    ckpt = load_checkpoint(config["checkpoint"])
    train_config = train_config_from(config)
    if config["protocol"] == "episode":
        _require(config, "evaluate (episode protocol)", "episodes")
        episodes = read_fewnerd_episodes(config["episodes"])
        report = evaluate_episodes(ckpt, episodes, train_config)
    else:
        _require(config, "evaluate (low-resource protocol)", "support", "test_corpus")
        support_corpus = read_conll(config["support"])
        test_corpus = read_conll(config["test_corpus"])
        label_set = _classes_from(support_corpus, "target")
        seeds = [config["seed"] + i for i in range(config["n_runs"])]
        report = low_resource_eval(ckpt, label_set, support_corpus, test_corpus,
                                   n_way=config["n_way"], k_shot=config["k_shot"],
                                   seeds=seeds, config=train_config,
                                   strict_k=config["strict_k"])
    path = _out_path(config, "eval_report.json")
    with open(path, "w", encoding="utf-8") as f:
        json.dump(report.summary(), f, indent=2, sort_keys=True)
    if report.per_run:
        print(f"runs: {len(report.per_run)}  "
              f"f1 per run: {', '.join(f'{x:.4f}' for x in report.per_run)}")
        print(f"mean {report.mean:.4f} +/- {report.std:.4f}")
    print(f"micro-F1 {report.f1:.4f} (P {report.precision:.4f}, "
          f"R {report.recall:.4f}); report written to {path}")
    return 0


def cmd_sample(config: dict) -> int:
    _require(config, "sample", "support")
    _snapshot(config, "sample")
    corpus = read_conll(config["support"])
    label_set = _classes_from(corpus, "target")
    sample = greedy_sample_support(corpus, label_set, config["n_way"],
                                   config["k_shot"], seed=config["seed"],
                                   strict_k=config["strict_k"])
    path = _out_path(config, "support.conll")
    write_conll(sample.sentences, path)
    counts = ", ".join(f"{c}={n}" for c, n in sorted(sample.counts.items()))
    print(f"sampled {len(sample.sentences)} sentences ({counts}) into {path}")
    if sample.overshoot:
        print(f"overshoot classes: {', '.join(sorted(sample.overshoot))}")
    return 0


def cmd_gradcheck(config: dict) -> int:
    _snapshot(config, "gradcheck")
    report = run_gradcheck(n_batches=config["gradcheck_batches"],
                           seed=config["seed"])
    for line in report.lines():
        print(line)
    return 0 if report.passed else EXIT_NUMERIC


def cmd_dump_embeddings(config: dict) -> int:
    _require(config, "dump-embeddings", "checkpoint", "input")
    _snapshot(config, "dump-embeddings")
    ckpt = load_checkpoint(config["checkpoint"])
    sentences = read_conll(config["input"])
    path = _out_path(config, "embeddings.tsv")
    n = dump_embeddings(ckpt, sentences, path, max_len=config["max_len"])
    print(f"wrote {n} token rows to {path}")
    return 0


_COMMANDS = {
    "train": cmd_train,
    "finetune": cmd_finetune,
    "predict": cmd_predict,
    "evaluate": cmd_evaluate,
    "sample": cmd_sample,
    "gradcheck": cmd_gradcheck,
    "dump-embeddings": cmd_dump_embeddings,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fewtag",
        description="Few-shot sequence labeling with Gaussian token embeddings")
    parser.add_argument("--config", help="JSON configuration file")
    parser.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config key (dot paths allowed)")
    parser.add_argument("--seed", type=int, help="root random seed")
    parser.add_argument("--out", help="output directory")
    parser.add_argument("--jobs", type=int,
                        help="worker budget for evaluation subcommands")
    sub = parser.add_subparsers(dest="command", required=True)

    path_flags = {
        "train": ["train_corpus", "label_map"],
        "finetune": ["checkpoint", "support", "label_map"],
        "predict": ["checkpoint", "support", "input"],
        "evaluate": ["checkpoint", "episodes", "support", "test_corpus"],
        "sample": ["support"],
        "gradcheck": [],
        "dump-embeddings": ["checkpoint", "input"],
    }
    extra_flags = {
        "evaluate": ["protocol", "n_way", "k_shot", "n_runs"],
        "sample": ["n_way", "k_shot"],
        "gradcheck": ["gradcheck_batches"],
    }
    for name in _COMMANDS:
        p = sub.add_parser(name)
        for key in path_flags[name]:
            p.add_argument(f"--{key.replace('_', '-')}", dest=key)
        for key in extra_flags.get(name, []):
            kind = str if key == "protocol" else int
            p.add_argument(f"--{key.replace('_', '-')}", dest=key, type=kind)
    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(
        level=os.environ.get("FEWTAG_LOG_LEVEL", "INFO").upper(),
        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        config = resolve_config(args)
        return _COMMANDS[args.command](config)
    except UsageError as e:
        log.error("usage error: %s", e)
        return EXIT_USAGE
    except (DataError, CheckpointError, FileNotFoundError) as e:
        log.error("data error: %s", e)
        return EXIT_DATA
    except (NumericError, FloatingPointError) as e:
        log.error("numeric error: %s", e)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
