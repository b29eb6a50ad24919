"""Command-line entry point: ``mifuse <command> [options]``.

Commands: synth-gen, train-source, cache-lalm, adapt, evaluate, ablate.
Every command except synth-gen reads one JSON run config (``--config``)
that can be patched with ``--set dotted.key=value``. A frozen copy of the
effective config is written into the output directory.

Exit codes: 0 ok, 2 invalid config/flags, 3 missing inputs or existing
output without ``--overwrite``, 4 LALM provider/transport failure.
"""
from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import os
import sys
import time
from pathlib import Path


from . import __version__
from .adapt import AdaptConfig, adapt_student, run_ablation, train_source
from .dataio import FeatureDataset, SynthShiftSpec, load_dataset, save_dataset, split, write_synth_shift
from .errors import DatasetError, MissingCacheEntry, TransportError, ValidationError
from .evalkit import curve_export, evaluate, write_curve_csv, write_report
from .fusion import FusionConfig
from .numkit import MlpClassifier
from .teachers import CacheOnlyProvider, HttpLalmProvider, NoisyOracle, NoisyOracleConfig, TeacherCache, lalm_sample_matrix

log = logging.getLogger("mifuse")

ENV_URL = "MIFUSE_PROVIDER_URL"
ENV_TOKEN = "MIFUSE_PROVIDER_TOKEN"
MODEL_VERSION = 1

DEFAULT_CONFIG = {
    "adapt": AdaptConfig().to_dict(),
    "fusion": FusionConfig().to_dict(),
    "teachers": "both",
    "data": {
        "source": None,
        "target": None,
        "target_labeled": None,
        "dev": None,
        "dev_fraction": 0.1,
        "source_dev_fraction": 0.1,
    },
    "provider": {
        "kind": "oracle",  # oracle | cache | http
        "accuracy": 0.7,
        "concentration": 5.0,
        "persistence": 0.8,
        "error_model": "feature",
        "seed": 0,
        "max_retries": 3,
        "backoff": 1.0,
        "timeout": 30.0,
        "max_workers": 1,
    },
    "cache": None,
    "source_model": None,
}


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


# ----------------------------------------------------------------------------
# config handling


def _merge(base: dict, patch: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in patch.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(config: dict, overrides) -> dict:
    config = copy.deepcopy(config)
    for item in overrides or []:
        if "=" not in item:
            raise CliError(2, f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        node = config
        parts = key.split(".")
        for p in parts[:-1]:
            if not isinstance(node.get(p), dict):
                raise CliError(2, f"--set {key}: {p!r} is not a config section")
            node = node[p]
        if parts[-1] not in node:
            raise CliError(2, f"--set {key}: unknown config key")
        node[parts[-1]] = _parse_value(value)
    return config


def load_run_config(path, overrides, seed=None) -> dict:
    patch = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise CliError(3, f"config file not found: {path}")
        try:
            patch = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise CliError(2, f"config {path} is not valid JSON: {exc}") from exc
    unknown = set(patch) - set(DEFAULT_CONFIG)
    if unknown:
        raise CliError(2, f"unknown config sections: {sorted(unknown)}")
    config = apply_overrides(_merge(DEFAULT_CONFIG, patch), overrides)
    if seed is not None:
        config["adapt"]["seed"] = seed
    validate_run_config(config)
    return config


def validate_run_config(config: dict):
    try:
        AdaptConfig.from_dict(config["adapt"])
        FusionConfig.from_dict(config["fusion"])
        prov = config["provider"]
        if prov["kind"] not in ("oracle", "cache", "http"):
            raise ValidationError(f"provider.kind must be oracle, cache or http, got {prov['kind']!r}")
        if prov["kind"] == "oracle":
            NoisyOracleConfig(prov["accuracy"], prov["concentration"], prov["seed"], prov["persistence"],
                              prov["error_model"])
        if config["teachers"] not in ("both", "cls", "lm"):
            raise ValidationError("teachers must be both, cls or lm")
        for key in ("dev_fraction", "source_dev_fraction"):
            frac = config["data"][key]
            if not 0.0 <= frac < 1.0:
                raise ValidationError(f"data.{key} must be in [0, 1), got {frac}")
    except (ValidationError, TypeError) as exc:
        raise CliError(2, f"invalid config: {exc}") from exc


def prepare_out(out, command: str, overwrite: bool, resume: bool = False) -> Path:
    if out is None:
        out = Path("runs") / f"{command}-{time.strftime('%Y%m%d-%H%M%S')}"
    out = Path(out)
    if out.exists() and any(out.iterdir()) and not (overwrite or resume):
        raise CliError(3, f"output directory {out} is not empty (use --overwrite)")
    out.mkdir(parents=True, exist_ok=True)
    return out


def freeze(config: dict, out: Path):
    (out / "run_config.json").write_text(json.dumps(config, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _need(config, *keys):
    node = config
    for k in keys:
        node = node[k]
    if node is None:
        raise CliError(2, f"config is missing {'.'.join(keys)}")
    if not Path(node).exists():
        raise CliError(3, f"input not found: {'.'.join(keys)} = {node}")
    return Path(node)


def _load(config, *keys) -> FeatureDataset:
    return load_dataset(_need(config, *keys))


def save_model(model: MlpClassifier, path, class_names):
    doc = {"version": MODEL_VERSION, "class_names": list(class_names), "model": model.to_dict()}
    Path(path).write_text(json.dumps(doc, sort_keys=True) + "\n", encoding="utf-8")


def load_model(path):
    path = Path(path)
    if not path.exists():
        raise CliError(3, f"model file not found: {path}")
    doc = json.loads(path.read_text(encoding="utf-8"))
    if doc.get("version") != MODEL_VERSION:
        raise CliError(2, f"{path}: unsupported model version {doc.get('version')!r}")
    return MlpClassifier.from_dict(doc["model"]), tuple(doc["class_names"])


def build_provider(config: dict, target_labeled: FeatureDataset | None):
    prov = config["provider"]
    kind = prov["kind"]
    if kind == "cache":
        return CacheOnlyProvider()
    if kind == "http":
        url = os.environ.get(ENV_URL)
        if not url:
            raise CliError(2, f"provider.kind=http needs ${ENV_URL}")
        return HttpLalmProvider(url, os.environ.get(ENV_TOKEN), prov["max_retries"], prov["backoff"], prov["timeout"])
    if target_labeled is None:
        raise CliError(2, "the noisy-oracle provider needs data.target_labeled")
    oc = NoisyOracleConfig(prov["accuracy"], prov["concentration"], prov["seed"], prov["persistence"],
                           prov["error_model"])
    return NoisyOracle.from_dataset(oc, target_labeled)


def _open_cache(config) -> TeacherCache:
    if config["cache"] is None:
        raise CliError(2, "config is missing cache (path of the LALM cache file)")
    return TeacherCache(config["cache"])


def _target_and_dev(config):
    """Target (unlabeled view), labeled target or None, dev split or None, eval split or None."""
    target = _load(config, "data", "target")
    labeled = _load(config, "data", "target_labeled") if config["data"]["target_labeled"] else None
    dev = evalset = None
    if config["data"]["dev"]:
        dev = _load(config, "data", "dev")
        evalset = labeled
    elif labeled is not None and config["data"]["dev_fraction"] > 0:
        frac = config["data"]["dev_fraction"]
        evalset, dev, _ = split(labeled, (1.0 - frac, frac, 0.0), config["adapt"]["seed"])
    else:
        evalset = labeled
    if labeled is not None and labeled.ids != target.ids:
        if set(labeled.ids) != set(target.ids):
            raise CliError(2, "target and target_labeled files hold different ids")
    return target.unlabeled() if target.labeled else target, labeled, dev, evalset


# ----------------------------------------------------------------------------
# commands


def cmd_synth_gen(args) -> int:
    if not 0.0 <= args.dev_fraction < 1.0:
        raise CliError(2, f"--dev-fraction must be in [0, 1), got {args.dev_fraction}")
    try:
        spec = SynthShiftSpec(
            n_classes=args.n_classes, feature_dim=args.feature_dim, samples_per_class=args.samples_per_class,
            separation=args.separation, mean_offset=args.mean_offset, rotation_deg=args.rotation_deg,
            noise_scale=args.noise_scale, layer_count=args.layer_count, seed=args.seed,
        )
    except ValidationError as exc:
        raise CliError(2, f"invalid synthetic spec: {exc}") from exc
    out = prepare_out(args.out, "synth-gen", args.overwrite)
    paths = write_synth_shift(spec, out)
    if args.dev_fraction > 0:
        labeled = load_dataset(paths["target_labeled"])
        _, dev, _ = split(labeled, (1.0 - args.dev_fraction, args.dev_fraction, 0.0), args.seed)
        paths["target_dev"] = save_dataset(dev, out / "target_dev.jsonl")
    (out / "synth_spec.json").write_text(json.dumps(spec.to_dict(), indent=2) + "\n", encoding="utf-8")
    for name, p in paths.items():
        print(f"wrote {name}: {p}")
    return 0


def cmd_train_source(args) -> int:
    config = load_run_config(args.config, args.set, args.seed)
    source = _load(config, "data", "source")
    out = prepare_out(args.out, "train-source", args.overwrite)
    freeze(config, out)
    acfg = AdaptConfig.from_dict(config["adapt"])
    frac = config["data"]["source_dev_fraction"]
    train, dev = source, None
    if frac > 0:
        train, dev, _ = split(source, (1.0 - frac, frac, 0.0), acfg.seed)
    print(f"training source classifier on {len(train)} samples")
    model = train_source(train, acfg)
    save_model(model, out / "source_model.json", source.class_names)
    report = evaluate(model, dev if dev is not None else train)
    write_report(out / "report_source.json", report, config, acfg.seed,
                 split="source_dev" if dev is not None else "source_train")
    print(f"source {'dev' if dev is not None else 'train'} UA {report.unweighted_accuracy:.4f} "
          f"-> {out / 'source_model.json'}")
    return 0


def _fill_cache(config, target, labeled, cache):
    acfg = AdaptConfig.from_dict(config["adapt"])
    provider = build_provider(config, labeled)
    before = len(cache)
    lalm_sample_matrix(provider, cache, target.ids, target.class_names, acfg.n_lm, acfg.lalm_temperature,
                       max_workers=config["provider"]["max_workers"])
    return len(cache) - before, provider


def cmd_cache_lalm(args) -> int:
    config = load_run_config(args.config, args.set, args.seed)
    target, labeled, _, _ = _target_and_dev(config)
    out = prepare_out(args.out, "cache-lalm", args.overwrite)
    freeze(config, out)
    cache = _open_cache(config)
    added, provider = _fill_cache(config, target, labeled, cache)
    stats = {"utterances": len(target), "new_entries": added, "total_entries": len(cache),
             "provider_calls": provider.calls}
    if hasattr(provider, "stats"):
        stats["parse_failures"] = provider.stats.failures
    (out / "cache_stats.json").write_text(json.dumps(stats, indent=2) + "\n", encoding="utf-8")
    print(f"cache {config['cache']}: {added} new entries, {len(cache)} total")
    return 0


def _adapt_once(config, target, dev, evalset, source_model, provider, cache, fusion, out: Path, resume=False):
    acfg = AdaptConfig.from_dict(config["adapt"])
    student, state = adapt_student(target, source_model, provider, cache, fusion, acfg, dev_data=dev,
                                   teachers=config["teachers"], checkpoint_dir=out, resume=resume,
                                   max_workers=config["provider"]["max_workers"])
    save_model(student, out / "student.json", target.class_names)
    if dev is not None:
        write_curve_csv(out / "curve.csv", curve_export(state.metric_log))
    result = {"steps": state.step, "best_step": state.tracker.best_step, "provider_calls": provider.calls}
    if dev is not None:
        result["dev_ua"] = evaluate(student, dev).unweighted_accuracy
    if evalset is not None:
        report = evaluate(student, evalset)
        write_report(out / "report.json", report, config, acfg.seed, split="target", **result)
        result["target_ua"] = report.unweighted_accuracy
    (out / "summary.json").write_text(json.dumps(result, indent=2) + "\n", encoding="utf-8")
    return student, state, result


def cmd_adapt(args) -> int:
    config = load_run_config(args.config, args.set, args.seed)
    source_model, class_names = load_model(_need(config, "source_model"))
    target, labeled, dev, evalset = _target_and_dev(config)
    if tuple(class_names) != target.class_names:
        raise CliError(2, "source model and target manifest disagree on class names")
    out = prepare_out(args.out, "adapt", args.overwrite, resume=args.resume)
    freeze(config, out)
    cache = _open_cache(config)
    provider = build_provider(config, labeled) if config["provider"]["kind"] != "cache" else CacheOnlyProvider()
    fusion = FusionConfig.from_dict(config["fusion"])
    if args.lr_scan:
        if dev is None:
            raise CliError(2, "--lr-scan needs a dev set (data.dev or data.target_labeled)")
        acfg = AdaptConfig.from_dict(config["adapt"])
        runs = []
        for lr in acfg.student_lr_grid:
            cfg_lr = apply_overrides(config, [f"adapt.student_lr={lr}"])
            run_dir = out / f"lr_{lr:g}"
            run_dir.mkdir(exist_ok=True)
            _, _, result = _adapt_once(cfg_lr, target, dev, evalset, source_model, provider, cache, fusion, run_dir)
            runs.append({"lr": lr, **result})
            print(f"lr {lr:g}: dev UA {result['dev_ua']:.4f}")
        best = max(runs, key=lambda r: (r["dev_ua"], -r["lr"]))
        (out / "lr_scan.json").write_text(json.dumps({"runs": runs, "selected_lr": best["lr"]}, indent=2) + "\n")
        print(f"selected lr {best['lr']:g}")
        return 0
    _, state, result = _adapt_once(config, target, dev, evalset, source_model, provider, cache, fusion, out,
                                   resume=args.resume)
    msg = f"adapted for {state.step} steps (best at {state.tracker.best_step})"
    if "target_ua" in result:
        msg += f", target UA {result['target_ua']:.4f}"
    print(msg)
    return 0


def cmd_evaluate(args) -> int:
    config = load_run_config(args.config, args.set, args.seed)
    model_path = args.model or config["source_model"]
    if model_path is None:
        raise CliError(2, "evaluate needs --model or source_model in the config")
    model, class_names = load_model(model_path)
    data_path = args.data or config["data"]["target_labeled"]
    if data_path is None or not Path(data_path).exists():
        raise CliError(3, f"evaluation data not found: {data_path}")
    data = load_dataset(data_path)
    if not data.labeled:
        raise CliError(2, f"{data_path} is not fully labeled")
    out = prepare_out(args.out, "evaluate", args.overwrite)
    freeze(config, out)
    report = evaluate(model, data)
    write_report(out / "report.json", report, config, config["adapt"]["seed"], model=str(model_path), data=str(data_path))
    print(f"UA {report.unweighted_accuracy:.4f}  accuracy {report.plain_accuracy:.4f}  n={report.n}")
    return 0


def cmd_ablate(args) -> int:
    config = load_run_config(args.config, args.set, args.seed)
    source_model, _ = load_model(_need(config, "source_model"))
    target, labeled, dev, evalset = _target_and_dev(config)
    if dev is None:
        raise CliError(2, "ablate needs a dev set to pick tau for KL cells")
    out = prepare_out(args.out, "ablate", args.overwrite)
    freeze(config, out)
    cache = _open_cache(config)
    if config["provider"]["kind"] != "cache":
        added, _ = _fill_cache(config, target, labeled, cache)
        print(f"prefilled LALM cache with {added} entries")

    def progress(row):
        tau = "" if row["tau"] is None else f" tau={row['tau']:g}"
        print(f"{row['generation']:6s} {row['gate']:8s} {row['weighting'] or '-':8s}{tau}  dev UA {row['dev_ua']:.4f}")

    rows = run_ablation(target, source_model, cache, AdaptConfig.from_dict(config["adapt"]), dev, evalset,
                        out_dir=out, progress=progress)
    key = "target_ua" if evalset is not None else "dev_ua"
    top = max(r[key] for r in rows)
    fields = ["generation", "similarity", "weighting", "tau", "dev_ua"] + (["target_ua"] if evalset is not None else [])
    with open(out / "ablation.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(fields + ["best"])
        for r in rows:
            vals = [r["generation"], r["gate"], r["weighting"] or "-", "" if r["tau"] is None else r["tau"],
                    f"{r['dev_ua']:.6f}"]
            if evalset is not None:
                vals.append(f"{r['target_ua']:.6f}")
            w.writerow(vals + ["*" if r[key] == top else ""])
    print(f"wrote {out / 'ablation.csv'} ({len(rows)} cells)")
    return 0


# ----------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="override adapt.seed")
    common.add_argument("--out", type=Path, default=None, help="output directory")
    common.add_argument("--overwrite", action="store_true", help="allow a non-empty output directory")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override, repeatable")

    parser = argparse.ArgumentParser(prog="mifuse", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"mifuse {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-gen", parents=[common], help="write a synthetic domain-shift benchmark")
    p.add_argument("--n-classes", type=int, default=4)
    p.add_argument("--feature-dim", type=int, default=16)
    p.add_argument("--samples-per-class", type=int, default=500)
    p.add_argument("--separation", type=float, default=3.0)
    p.add_argument("--mean-offset", type=float, default=1.5)
    p.add_argument("--rotation-deg", type=float, default=25.0)
    p.add_argument("--noise-scale", type=float, default=1.3)
    p.add_argument("--layer-count", type=int, default=1)
    p.add_argument("--dev-fraction", type=float, default=0.0,
                   help="also write a stratified target dev split of this size")
    p.set_defaults(func=cmd_synth_gen)

    for name, func, helptext in (
        ("train-source", cmd_train_source, "train the source classifier"),
        ("cache-lalm", cmd_cache_lalm, "query the LALM provider for every target utterance"),
        ("adapt", cmd_adapt, "adapt a student on the unlabeled target set"),
        ("evaluate", cmd_evaluate, "evaluate a saved model"),
        ("ablate", cmd_ablate, "run the fusion-strategy ablation grid"),
    ):
        p = sub.add_parser(name, parents=[common], help=helptext)
        p.add_argument("--config", type=Path, default=None, help="JSON run config")
        p.set_defaults(func=func)
        if name == "adapt":
            p.add_argument("--resume", action="store_true", help="continue from checkpoint.json in --out")
            p.add_argument("--lr-scan", action="store_true", help="scan adapt.student_lr_grid, pick by dev UA")
        if name == "evaluate":
            p.add_argument("--model", type=Path, default=None)
            p.add_argument("--data", type=Path, default=None)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.command == "synth-gen":
        if args.set:
            parser.error("synth-gen takes flags, not --set")
        args.seed = 0 if args.seed is None else args.seed
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except MissingCacheEntry as exc:
        print(f"error: cache incomplete, first missing (id, index) = ({exc.utterance_id}, {exc.sample_index})",
              file=sys.stderr)
        return 4
    except TransportError as exc:
        print(f"error: provider failure: {exc}", file=sys.stderr)
        return 4
    except (FileNotFoundError, DatasetError) as exc:
        code = 3 if isinstance(exc, FileNotFoundError) else 2
        print(f"error: {exc}", file=sys.stderr)
        return code
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
