"""Command-line driver: generate synthetic cohorts, train, and evaluate.

One JSON config file per run, nested sections generate / data / train /
evaluate; every flag overrides its config key. Outputs are byte-identical
across reruns with the same inputs and seed; timestamps appear only in
logging output, never in artifacts. Exit codes: 0 success, 2 config
error, 3 data error, 4 runtime error.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
from dataclasses import asdict, fields
from pathlib import Path

from .checkpoint import load_checkpoint, save_checkpoint
from .conformal import ConformalSetPredictor
from .encoding import FileBackedEncoder, HashingTextEncoder
from .errors import (
    CohortValidationError,
    ConfigurationError,
    DataFormatError,
    EmptyInputError,
)
from .graph import export_trajectory, forward_trajectory, write_graph_export
from .ingestion import (
    KeywordLexicon,
    RemoteExtractor,
    RuleBasedExtractor,
    load_cohort,
)
from .metrics import DEFAULT_KS
from .model import GraphCodePredictor, evaluate_split, true_label_sets
from .params import ModelDims
from .synthetic import GeneratorConfig, generate_cohort, write_icd_map
from .training import TrainConfig, split_cohort, train_model

logger = logging.getLogger("codecast")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_RUNTIME = 4

DATA_KEYS = {
    "cohort": None,
    "icd_map": None,
    "keywords": None,
    "headings": None,
    "prop_cap": 50,
    "code_cap": 30,
    "top_k": 3,
    "encoder": "hash",
    "embedding_file": None,
    "extractor": "rule",
    "extractor_endpoint": None,
}
TRAIN_EXTRA_KEYS = {
    "embed_dim": 768,
    "proj_dim": 128,
    "pool_hidden": 128,
    "pooled_dim": 64,
    "use_graph": True,
}
EVAL_KEYS = {
    "epsilons": [0.1],
    "ks": list(DEFAULT_KS),
    "threshold": 0.5,
    "export_graph": False,
    "prop_cap_sweep": None,
    "split": "test",
}
TOP_LEVEL_SECTIONS = ("generate", "data", "train", "evaluate")


def _check_keys(section: dict, allowed, name: str) -> None:
    unknown = sorted(set(section) - set(allowed))
    if unknown:
        raise ConfigurationError(f"unknown keys in '{name}' config: {unknown}")


def load_config(path) -> dict:
    if path is None:
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            config = json.load(fh)
    except FileNotFoundError:
        raise ConfigurationError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{path}: invalid JSON: {exc}") from exc
    if not isinstance(config, dict):
        raise ConfigurationError(f"{path}: config must be a JSON object")
    _check_keys(config, TOP_LEVEL_SECTIONS, "top-level")
    for section in TOP_LEVEL_SECTIONS:
        if section in config and not isinstance(config[section], dict):
            raise ConfigurationError(f"{path}: section '{section}' must be an object")
    return config


def _merged_section(config: dict, name: str, defaults: dict, overrides: dict) -> dict:
    section = dict(config.get(name, {}))
    _check_keys(section, defaults, name)
    merged = dict(defaults)
    merged.update(section)
    for key, value in overrides.items():
        if value is not None:
            merged[key] = value
    return merged


def config_hash(payload: dict) -> str:
    canonical = json.dumps(payload, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.blake2b(canonical.encode("utf-8"), digest_size=16).hexdigest()


def _build_extractor(data_cfg: dict, lexicon: KeywordLexicon):
    choice = data_cfg["extractor"]
    if choice == "rule":
        return None
    if choice == "remote":
        endpoint = data_cfg["extractor_endpoint"]
        if not endpoint:
            raise ConfigurationError("extractor 'remote' needs extractor_endpoint")
        return RemoteExtractor(
            endpoint,
            token=os.environ.get("CODECAST_EXTRACTOR_TOKEN"),
            fallback=RuleBasedExtractor(lexicon),
        )
    raise ConfigurationError(f"unknown extractor {choice!r} (expected rule or remote)")


def _build_encoder(data_cfg: dict, embed_dim: int):
    choice = data_cfg["encoder"]
    if choice == "hash":
        return HashingTextEncoder(embed_dim)
    if choice == "file":
        path = data_cfg["embedding_file"]
        if not path:
            raise ConfigurationError("encoder 'file' needs embedding_file")
        return FileBackedEncoder(path)
    raise ConfigurationError(f"unknown encoder {choice!r} (expected hash or file)")


def _load_cohort_from_config(data_cfg: dict, prop_cap: int | None = None):
    cohort_path = data_cfg["cohort"]
    icd_path = data_cfg["icd_map"]
    if not cohort_path or not icd_path:
        raise ConfigurationError("data config needs 'cohort' and 'icd_map' paths")
    for path in (cohort_path, icd_path):
        if not Path(path).exists():
            raise DataFormatError(f"input file not found: {path}")
    keywords = data_cfg["keywords"]
    lexicon = KeywordLexicon.from_file(keywords) if keywords else KeywordLexicon.default()
    extractor = _build_extractor(data_cfg, lexicon)
    return load_cohort(
        cohort_path,
        icd_path,
        keywords_path=keywords,
        headings_path=data_cfg["headings"],
        extractor=extractor,
        top_k=int(data_cfg["top_k"]),
        prop_cap=int(prop_cap if prop_cap is not None else data_cfg["prop_cap"]),
        code_cap=int(data_cfg["code_cap"]),
    )


def cmd_generate(args) -> int:
    config = load_config(args.config)
    section = dict(config.get("generate", {}))
    allowed = {f.name for f in fields(GeneratorConfig)}
    _check_keys(section, allowed, "generate")
    if args.seed is not None:
        section["seed"] = args.seed
    if "seed" not in section or section["seed"] is None:
        raise ConfigurationError("seed required")
    gen_config = GeneratorConfig(**section)
    out_dir = Path(args.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    content, truth = generate_cohort(gen_config)
    cohort_path = out_dir / "cohort.jsonl"
    cohort_path.write_text(content, encoding="utf-8")
    write_icd_map(truth, out_dir / "icd_map.csv")
    (out_dir / "ground_truth.json").write_text(truth.to_json() + "\n", encoding="utf-8")
    n_admissions = len(truth.admissions)
    print(
        f"generated {gen_config.n_patients} patients, {n_admissions} admissions, "
        f"{len(truth.codes)} codes -> {cohort_path}"
    )
    return EXIT_OK


def cmd_train(args) -> int:
    config = load_config(args.config)
    data_cfg = _merged_section(
        config, "data", DATA_KEYS,
        {"cohort": args.cohort, "icd_map": args.icd_map},
    )
    train_defaults = {f.name: f.default for f in fields(TrainConfig)}
    train_defaults.update(TRAIN_EXTRA_KEYS)
    train_cfg_dict = _merged_section(
        config, "train", train_defaults,
        {"seed": args.seed, "max_epochs": args.max_epochs},
    )
    dims = ModelDims(
        embed_dim=int(train_cfg_dict.pop("embed_dim")),
        proj_dim=int(train_cfg_dict.pop("proj_dim")),
        pool_hidden=int(train_cfg_dict.pop("pool_hidden")),
        pooled_dim=int(train_cfg_dict.pop("pooled_dim")),
    )
    use_graph = bool(train_cfg_dict.pop("use_graph"))
    train_config = TrainConfig(**train_cfg_dict)
    train_config.validate()
    dims.validate()

    patients = _load_cohort_from_config(data_cfg)
    split = split_cohort(len(patients), train_config.seed)
    encoder = _build_encoder(data_cfg, dims.embed_dim)

    out_dir = Path(args.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    resume_args = {}
    if args.resume:
        checkpoint = load_checkpoint(args.resume)
        if checkpoint.label_vocab != sorted(checkpoint.label_vocab):
            raise DataFormatError("resume checkpoint has a corrupt label vocabulary")
        params = checkpoint.restore_params()
        resume_args = {
            "start_epoch": checkpoint.epochs_completed,
            "params": params,
            "adam_state": (checkpoint.adam_t, checkpoint.adam_arrays),
        }
        logger.info("resuming from %s at epoch %d", args.resume, checkpoint.epochs_completed)
    result = train_model(
        [patients[i] for i in split.train],
        [patients[i] for i in split.valid],
        train_config,
        dims,
        encoder,
        use_graph=use_graph,
        history_path=out_dir / "history.jsonl",
        **resume_args,
    )
    save_checkpoint(out_dir / "checkpoint.bin", result)
    print(
        f"trained {len(split.train)} patients for "
        f"{len(result.history)} epochs (best epoch {result.best_epoch}) "
        f"-> {out_dir / 'checkpoint.bin'}"
    )
    return EXIT_OK


def _parse_float_list(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise ConfigurationError(f"expected a comma-separated float list, got {text!r}") from None


def _parse_int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise ConfigurationError(f"expected a comma-separated int list, got {text!r}") from None


def cmd_evaluate(args) -> int:
    config = load_config(args.config)
    data_cfg = _merged_section(
        config, "data", DATA_KEYS,
        {"cohort": args.cohort, "icd_map": args.icd_map},
    )
    eval_cfg = _merged_section(
        config, "evaluate", EVAL_KEYS,
        {
            "epsilons": _parse_float_list(args.epsilon) if args.epsilon else None,
            "threshold": args.threshold,
            "export_graph": True if args.export_graph else None,
            "prop_cap_sweep": _parse_int_list(args.prop_cap) if args.prop_cap else None,
        },
    )
    if eval_cfg["split"] not in ("test", "valid", "all"):
        raise ConfigurationError(f"evaluate.split must be test/valid/all, got {eval_cfg['split']}")
    epsilons = [float(e) for e in eval_cfg["epsilons"]]
    if not epsilons:
        raise ConfigurationError("need at least one epsilon")
    threshold = float(eval_cfg["threshold"])
    if not 0.0 <= threshold <= 1.0:
        raise ConfigurationError(f"threshold must be in [0, 1], got {threshold}")
    ks = [int(k) for k in eval_cfg["ks"]]

    checkpoint = load_checkpoint(args.checkpoint)
    est = GraphCodePredictor.from_checkpoint(checkpoint)
    if data_cfg["encoder"] != "hash" or data_cfg["embedding_file"]:
        est.encoder_ = _build_encoder(data_cfg, checkpoint.dims.embed_dim)

    patients = _load_cohort_from_config(data_cfg)
    split = split_cohort(len(patients), checkpoint.config.seed)
    valid = [patients[i] for i in split.valid]
    if eval_cfg["split"] == "test":
        eval_indices = split.test
    elif eval_cfg["split"] == "valid":
        eval_indices = split.valid
    else:
        eval_indices = list(range(len(patients)))
    test = [patients[i] for i in eval_indices]

    out_dir = Path(args.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    report = est.evaluate(test, ks=ks)
    test_probs = est.predict_proba(test)
    true_sets = true_label_sets(test, est.vocab_index_)

    sweep_rows = []
    for epsilon in epsilons:
        calibrator = est.calibrate(valid, epsilon=epsilon)
        coverage, miw, ie = calibrator.score_metrics(test_probs, true_sets)
        sweep_rows.append((epsilon, calibrator.tau_, coverage, miw, ie))
    with open(out_dir / "conformal_sweep.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epsilon", "tau", "coverage", "miw", "ie"])
        for row in sweep_rows:
            writer.writerow([repr(v) if isinstance(v, float) else v for v in row])

    primary_epsilon, primary_tau, coverage, miw, ie = sweep_rows[0]
    primary = ConformalSetPredictor(epsilon=primary_epsilon)
    primary.tau_ = primary_tau
    with open(out_dir / "prediction_sets.jsonl", "w", encoding="utf-8") as fh:
        for records, sets in zip(test, primary.predict(test_probs)):
            fh.write(json.dumps({
                "patient_id": records[0].patient_id,
                "labels": [est.label_vocab_[j] for j in sets],
                "tau": primary_tau,
                "epsilon": primary_epsilon,
            }, sort_keys=True) + "\n")

    if eval_cfg["export_graph"]:
        rows = []
        for records in test:
            out = forward_trajectory(
                records[:-1], est.params_, est.encoder_, est.temperature_,
                training=False, use_graph=est.use_graph,
            )
            for pos, edge in export_trajectory(out.samples, threshold):
                rows.append((f"{records[0].patient_id}/{out.kept[pos]}", edge))
        write_graph_export(
            rows, out_dir / "graph_edges.csv", out_dir / "graph_manifest.json",
            threshold, est.temperature_, checkpoint.config.seed,
        )

    if eval_cfg["prop_cap_sweep"]:
        caps = [int(c) for c in eval_cfg["prop_cap_sweep"]]
        with open(out_dir / "prop_cap_sweep.csv", "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["prop_cap", "auroc"]
                            + [f"p@{k}" for k in ks] + [f"r@{k}" for k in ks])
            for cap in caps:
                cap_patients = _load_cohort_from_config(data_cfg, prop_cap=cap)
                cap_test = [cap_patients[i] for i in eval_indices]
                cap_report = evaluate_split(
                    cap_test, est.params_, est.encoder_, est.temperature_,
                    est.label_vocab_, ks, est.use_graph,
                )
                writer.writerow(
                    [cap, repr(cap_report.auroc)]
                    + [repr(cap_report.precision_at[k]) for k in ks]
                    + [repr(cap_report.recall_at[k]) for k in ks]
                )

    metrics = {
        "auroc": report.auroc,
        "p@10": report.precision_at.get(10),
        "r@10": report.recall_at.get(10),
        "p@20": report.precision_at.get(20),
        "r@20": report.recall_at.get(20),
        "coverage": coverage,
        "miw": miw,
        "ie": ie,
        "n": report.n_admissions,
        "seed": checkpoint.config.seed,
        "config_hash": config_hash({
            "data": data_cfg, "evaluate": eval_cfg,
            "train": asdict(checkpoint.config), "dims": asdict(checkpoint.dims),
        }),
    }
    with open(out_dir / "metrics.json", "w", encoding="utf-8") as fh:
        json.dump(metrics, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(
        f"evaluated {report.n_admissions} admissions: auroc {report.auroc:.4f}, "
        f"r@20 {report.recall_at.get(20, float('nan')):.4f}, coverage {coverage:.4f} "
        f"-> {out_dir / 'metrics.json'}"
    )
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="codecast",
        description="Forecast next-admission diagnosis codes with learned "
                    "temporal causal graphs and conformal prediction sets.",
    )
    parser.add_argument("--verbose", action="store_true", help="log at DEBUG level")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("generate", help="synthesize a cohort with planted structure")
    gen.add_argument("--config", required=True, help="JSON config with a 'generate' section")
    gen.add_argument("--output-dir", default=".", help="where to write cohort files")
    gen.add_argument("--seed", type=int, default=None, help="override generate.seed")

    tr = sub.add_parser("train", help="train a model on a cohort")
    tr.add_argument("--config", required=True, help="JSON config with data/train sections")
    tr.add_argument("--output-dir", default=".", help="where to write checkpoint and history")
    tr.add_argument("--cohort", default=None, help="override data.cohort")
    tr.add_argument("--icd-map", default=None, help="override data.icd_map")
    tr.add_argument("--seed", type=int, default=None, help="override train.seed")
    tr.add_argument("--max-epochs", type=int, default=None, help="override train.max_epochs")
    tr.add_argument("--resume", default=None, help="checkpoint to continue training from")

    ev = sub.add_parser("evaluate", help="metrics, prediction sets, graph export")
    ev.add_argument("--config", default=None, help="JSON config with data/evaluate sections")
    ev.add_argument("--checkpoint", required=True, help="trained checkpoint path")
    ev.add_argument("--output-dir", default=".", help="where to write evaluation artifacts")
    ev.add_argument("--cohort", default=None, help="override data.cohort")
    ev.add_argument("--icd-map", default=None, help="override data.icd_map")
    ev.add_argument("--epsilon", default=None,
                    help="comma-separated miscoverage levels, e.g. 0.05,0.1,0.2")
    ev.add_argument("--prop-cap", default=None,
                    help="comma-separated proposition caps to sweep, e.g. 0,10,20,30,40,50")
    ev.add_argument("--export-graph", action="store_true", help="write the edge CSV")
    ev.add_argument("--threshold", type=float, default=None,
                    help="edge export weight threshold (default 0.5)")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    handlers = {"generate": cmd_generate, "train": cmd_train, "evaluate": cmd_evaluate}
    try:
        return handlers[args.command](args)
    except ConfigurationError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataFormatError, CohortValidationError, EmptyInputError,
            FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        logger.exception("run failed")
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
