"""Command-line entry point: ``hypnokit <command> ...``.

Exit codes: 0 success, 2 usage error, 3 data/format error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import hashlib
import json
import logging
import os
import platform
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import __version__
from . import confidence as conf
from . import metrics, stats, synth
from .errors import ConfigError, HypnokitError, IoError, NumericError, UsageError
from .net.checkpoint import load_checkpoint, load_ensemble, save_checkpoint, write_manifest
from .net.infer import infer_record
from .net.model import ModelConfig, USleep
from .net.train import TrainConfig, TrainRecord, format_log, make_cv_splits, train
from .preprocess import PreprocessConfig, load_preprocessed, preprocess_recording, save_preprocessed
from .psg_io import Hypnogram, Stage, load_record, read_hypnogram, write_arousals, write_hypnogram

log = logging.getLogger("hypnokit")


# --------------------------------------------------------------------------
# configuration


@dataclass
class GlobalConfig:
    data_root: str = "."
    checkpoint_dir: str = "checkpoints"
    report_dir: str = "reports"
    seed: int = 0
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: dict = field(default_factory=dict)  # TrainConfig overrides; mode comes from the command line
    synth: synth.SynthConfig = field(default_factory=synth.SynthConfig)
    lme_model: str = "C"
    lme_response: str = "kappa"
    lme_group: str = "cohort"
    val_subjects: int = 10

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        raw = json.dumps(self.to_dict(), sort_keys=True, default=str).encode()
        return hashlib.sha256(raw).hexdigest()


_SECTION_TYPES = {
    "preprocess": PreprocessConfig,
    "model": ModelConfig,
    "train": TrainConfig,
    "synth": synth.SynthConfig,
}
_PLAIN_KEYS = {
    "paths": ("data_root", "checkpoint_dir", "report_dir"),
    "general": ("seed", "val_subjects"),
    "lme": ("model", "response", "group"),
}


def _convert(raw: str, default, key: str):
    text = raw.strip()
    try:
        if isinstance(default, bool):
            if text.lower() in ("1", "true", "yes", "on"):
                return True
            if text.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, int) and not isinstance(default, bool):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            # matrix rows separated by ';', entries by whitespace or ','
            return tuple(tuple(float(v) for v in row.replace(",", " ").split()) for row in text.split(";"))
        if default is None:
            if text.lower() in ("", "none"):
                return None
            return float(text) if any(ch in text for ch in ".eE") else int(text)
        return text
    except ValueError as exc:
        raise ConfigError(f"cannot parse {key} = {raw!r}", key=key) from exc


def _section_kwargs(cls, items: dict, section: str) -> dict:
    defaults = {f.name: f.default for f in fields(cls)} if cls is TrainConfig else {
        f.name: getattr(cls(), f.name) for f in fields(cls)}
    kwargs = {}
    for key, raw in items.items():
        if key not in defaults or isinstance(defaults[key], dict) or (cls is TrainConfig and key == "mode"):
            raise ConfigError(f"unknown or unsupported config key {section}.{key}", key=f"{section}.{key}")
        kwargs[key] = _convert(raw, defaults[key], f"{section}.{key}")
    try:
        cls(**kwargs)
    except UsageError as exc:
        raise ConfigError(f"[{section}] {exc}", key=section) from exc
    return kwargs


def load_config(path: str | None) -> GlobalConfig:
    cfg = GlobalConfig()
    if path:
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        try:
            with open(path, encoding="utf-8") as fh:
                parser.read_file(fh)
        except OSError as exc:
            raise IoError(f"cannot read config {path}: {exc}") from exc
        except configparser.Error as exc:
            raise ConfigError(f"malformed config {path}: {exc}") from exc
        for section in parser.sections():
            items = dict(parser.items(section))
            if section in _SECTION_TYPES:
                kwargs = _section_kwargs(_SECTION_TYPES[section], items, section)
                setattr(cfg, section, kwargs if section == "train" else _SECTION_TYPES[section](**kwargs))
            elif section in _PLAIN_KEYS:
                for key, raw in items.items():
                    if key not in _PLAIN_KEYS[section]:
                        raise ConfigError(f"unknown config key {section}.{key}", key=f"{section}.{key}")
                    attr = key if section != "lme" else f"lme_{key}"
                    setattr(cfg, attr, _convert(raw, getattr(cfg, attr), f"{section}.{key}"))
            else:
                raise ConfigError(f"unknown config section [{section}]", key=section)
    env = os.environ.get("HYPNOKIT_SEED")
    if env is not None and env.strip():
        try:
            cfg.seed = int(env)
        except ValueError as exc:
            raise ConfigError(f"HYPNOKIT_SEED must be an integer, got {env!r}", key="HYPNOKIT_SEED") from exc
    return cfg


# --------------------------------------------------------------------------
# helpers


def _ensure_dir(path) -> Path:
    p = Path(path)
    try:
        p.mkdir(parents=True, exist_ok=True)
        probe = p / ".hypnokit-write-test"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise IoError(f"cannot write to {p}: {exc}") from exc
    return p


def _versions() -> dict:
    import numba
    import scipy

    return {
        "hypnokit": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "numba": numba.__version__,
    }


def _write_run_manifest(directory: Path, command: str, args: argparse.Namespace, cfg: GlobalConfig,
                        inputs: list[str], outputs: list[str] | None = None) -> Path:
    doc = {
        "command": command,
        "arguments": {k: v for k, v in sorted(vars(args).items()) if k != "func"},
        "inputs": sorted(inputs),
        "outputs": sorted(outputs or []),
        "seed": cfg.seed,
        "config_sha256": cfg.digest(),
        "versions": _versions(),
    }
    path = directory / f"run_manifest.{command}.json"
    path.write_text(json.dumps(doc, indent=2, sort_keys=True, default=str) + "\n")
    return path


def _dump(path: Path, text: str) -> None:
    try:
        path.write_text(text, encoding="utf-8")
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def _list_records(directory) -> list[Path]:
    d = Path(directory)
    if not d.is_dir():
        raise IoError(f"{d} is not a directory")
    npz = sorted(d.glob("*.npz"))
    return npz if npz else sorted(d.glob("*.edf"))


def _load_any(path: Path, cfg: GlobalConfig):
    if path.suffix == ".npz":
        return load_preprocessed(path)
    rec, _ = preprocess_recording(load_record(path), cfg.preprocess, with_rules=False)
    return rec


# --------------------------------------------------------------------------
# commands


def cmd_synth_gen(args, cfg: GlobalConfig) -> int:
    out = _ensure_dir(args.out)
    scfg = replace(cfg.synth, seed=cfg.seed)
    if args.subjects is not None:
        scfg = replace(scfg, n_subjects=args.subjects)
    if args.hours is not None:
        scfg = replace(scfg, night_len_hours=args.hours)
    paths = synth.gen_corpus(scfg, out)
    outputs = [p.name for p in paths]
    if args.covariates:
        rows = synth.gen_covariates(args.covariates, n_cohorts=args.cohorts, seed=cfg.seed)
        cov = out / "covariates.csv"
        with open(cov, "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=synth.COVARIATE_COLUMNS, lineterminator="\n")
            w.writeheader()
            for r in rows:
                w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
        outputs.append(cov.name)
    manifest = {"records": [p.stem for p in paths], "n_subjects": scfg.n_subjects, "seed": scfg.seed,
                "night_len_hours": scfg.night_len_hours, "files": outputs}
    _dump(out / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    _write_run_manifest(out, "synth-gen", args, cfg, [], outputs)
    print(json.dumps(manifest, sort_keys=True))
    return 0


def cmd_preprocess(args, cfg: GlobalConfig) -> int:
    src = Path(args.inp)
    out = _ensure_dir(args.out)
    edfs = sorted(src.glob("*.edf")) if src.is_dir() else []
    if not src.is_dir():
        raise IoError(f"{src} is not a directory")
    if not edfs:
        log.warning("no EDF files in %s", src)
    lines = []
    written = []
    for path in edfs:
        rec = load_record(path)
        if rec.hypnogram is None:
            log.warning("%s has no hypnogram; skipped", path.name)
            continue
        processed, report = preprocess_recording(rec, cfg.preprocess)
        lines.append(report.to_json())
        if report.accepted:
            save_preprocessed(processed, out / f"{rec.id}.npz")
            write_hypnogram(processed.hypnogram, out / f"{rec.id}.hypnogram.csv")
            write_arousals(processed.arousals or (), out / f"{rec.id}.arousals.csv")
            written.append(rec.id)
    _dump(out / "rejections.jsonl", "".join(line + "\n" for line in lines))
    _write_run_manifest(out, "preprocess", args, cfg, [p.name for p in edfs], written)
    return 0


def _datasets_from_dirs(dirs: list[str]) -> dict[str, list[TrainRecord]]:
    datasets = {}
    for d in dirs:
        p = Path(d)
        files = sorted(p.glob("*.npz")) if p.is_dir() else []
        if not files:
            raise UsageError(f"{d}: no preprocessed records (*.npz); run `hypnokit preprocess` first")
        name = p.resolve().name
        base, k = name, 1
        while name in datasets:
            k += 1
            name = f"{base}_{k}"
        datasets[name] = [TrainRecord.from_recording(load_preprocessed(f)) for f in files]
    return datasets


def cmd_train(args, cfg: GlobalConfig) -> int:
    if args.mode == "finetune" and not args.init:
        raise UsageError("--mode finetune requires --init CHECKPOINT")
    settings = dict(cfg.train, mode=args.mode, seed=cfg.seed)
    for name in ("lr", "batch_size", "minibatches_per_epoch", "max_epochs", "early_stop_patience", "val_max_pairs"):
        value = getattr(args, name)
        if value is not None:
            settings[name] = value
    tcfg = TrainConfig(**settings)
    dirs = [d for d in args.data.split(",") if d]
    datasets = _datasets_from_dirs(dirs)
    out = _ensure_dir(args.out)
    init = load_checkpoint(args.init) if args.init else None
    source = "pretrained" if args.mode == "pretrain" else ("generalized" if len(dirs) > 1 else "site_specific")
    val_n = args.val_subjects if args.val_subjects is not None else cfg.val_subjects
    subjects = {name: sorted({r.subject for r in recs}) for name, recs in datasets.items()}

    if args.cv and args.cv > 1:
        plan = make_cv_splits(subjects, folds=args.cv, val_subjects=val_n, seed=cfg.seed)
    else:
        plan = [_holdout_plan(subjects, val_n, cfg.seed)]
    _dump(out / "cv_plan.json", json.dumps([f.to_dict() for f in plan], indent=2, sort_keys=True) + "\n")

    members = []
    for fold in plan:
        model = init.to_model() if init is not None else USleep(cfg.model, seed=cfg.seed)
        train_sets = {n: [r for r in recs if r.subject in set(fold.train[n])] for n, recs in datasets.items()}
        val = [r for n, recs in datasets.items() for r in recs if r.subject in set(fold.val.get(n, []))]

        def progress(tr, va, k=fold.index):
            log.info("fold %d epoch %d: train loss %.4f, val kappa %.4f", k, tr["epoch"], tr["loss"], va["kappa"])

        try:
            result = train(model, train_sets, val, replace(tcfg, seed=cfg.seed + fold.index), source=source,
                           progress=progress)
        except NumericError as exc:
            ckpt = getattr(exc, "checkpoint", None)
            if ckpt is not None:
                save_checkpoint(ckpt, out / f"fold{fold.index}.last_good.ckpt")
            raise
        path = save_checkpoint(result.checkpoint, out / f"fold{fold.index}.ckpt")
        _dump(out / f"fold{fold.index}.log.csv", format_log(result.log))
        members.append(path)
    write_manifest(members, out / "ensemble.json", source=source, folds=len(plan))
    _write_run_manifest(out, "train", args, cfg, dirs, [p.name for p in members] + ["ensemble.json"])
    return 0


def _holdout_plan(subjects: dict[str, list[str]], val_n: int, seed: int):
    from .net.train import Fold

    rng = np.random.default_rng(seed)
    fold = Fold(0, {}, {}, {})
    for name in sorted(subjects):
        subs = subjects[name]
        if len(subs) <= val_n:
            raise UsageError(f"dataset {name!r} has {len(subs)} subjects; cannot hold out {val_n} for validation")
        pick = set(subs[i] for i in rng.choice(len(subs), size=val_n, replace=False))
        fold.test[name] = []
        fold.val[name] = sorted(pick)
        fold.train[name] = sorted(set(subs) - pick)
    return fold


def cmd_stage(args, cfg: GlobalConfig) -> int:
    models = load_ensemble(args.model)
    out = _ensure_dir(args.out)
    records = _list_records(args.inp)
    errors = []
    done = []
    for path in records:
        rid = path.name.split(".")[0]
        try:
            rec = _load_any(path, cfg)
            density = infer_record(models if len(models) > 1 else models[0], rec, max_pairs=args.max_pairs)
        except HypnokitError as exc:
            errors.append(json.dumps({"record_id": rid, "error": type(exc).__name__, "message": str(exc)},
                                     sort_keys=True))
            log.warning("%s: %s", rid, exc)
            continue
        write_hypnogram(density.hypnogram(), out / f"{rec.id}.hypnogram.csv")
        _dump(out / f"{rec.id}.density.csv", conf.density_csv(density))
        _dump(out / f"{rec.id}.confidence.json",
              conf.summary_json(density, {"record_id": rec.id, "ensemble_size": len(models)}) + "\n")
        if args.plot:
            _dump(out / f"{rec.id}.svg", conf.density_svg(density, title=rec.id))
        done.append(rec.id)
    _dump(out / "errors.jsonl", "".join(e + "\n" for e in errors))
    _write_run_manifest(out, "stage", args, cfg, [p.name for p in records], done)
    return 0


def _hypnograms(directory) -> dict[str, Hypnogram]:
    d = Path(directory)
    if not d.is_dir():
        raise IoError(f"{d} is not a directory")
    return {p.name[: -len(".hypnogram.csv")]: read_hypnogram(p) for p in sorted(d.glob("*.hypnogram.csv"))}


def _read_groups(path) -> dict[str, str]:
    groups = {}
    for row in _read_rows(path):
        rid = row.get("record_id") or row.get("record")
        if rid is None or "cohort" not in row:
            raise UsageError(f"{path}: group table needs columns record_id (or record) and cohort")
        groups[rid] = row["cohort"]
    return groups


def _aligned(a: Hypnogram, b: Hypnogram) -> tuple[Hypnogram, Hypnogram]:
    if len(a) == len(b):
        return a, b
    n = min(len(a), len(b))
    log.warning("hypnogram lengths differ (%d vs %d); comparing the first %d epochs", len(a), len(b), n)
    return Hypnogram(a.stages[:n], a.epoch_len_sec), Hypnogram(b.stages[:n], b.epoch_len_sec)


def cmd_evaluate(args, cfg: GlobalConfig) -> int:
    refs = _hypnograms(args.ref)
    preds = _hypnograms(args.pred)
    common = sorted(set(refs) & set(preds))
    if not common:
        raise UsageError("no record has both a prediction and a reference hypnogram")
    out = Path(args.out)
    _ensure_dir(out.parent if str(out.parent) else ".")
    cohort = _read_groups(args.groups) if args.groups else {}
    nights, reports, groups, rows = [], [], [], []
    for rid in common:
        ref, pred = _aligned(refs[rid], preds[rid])
        rep = metrics.agreement(ref, pred)
        night = {
            "record_id": rid,
            "agreement": rep.to_dict(),
            "sleep_metrics_reference": metrics.sleep_metrics(ref).to_dict(),
            "sleep_metrics_prediction": metrics.sleep_metrics(pred).to_dict(),
            "rem_alignment": metrics.period_alignment(ref, pred, stage=Stage.R).to_dict(),
            "n2_alignment": metrics.period_alignment(ref, pred, stage=Stage.N2).to_dict(),
        }
        if args.light_sleep:
            night["light_sleep"] = metrics.remap_light_sleep(rep).to_dict()
        nights.append(night)
        reports.append(rep)
        groups.append(cohort.get(rid, "unassigned"))
        row = {"record_id": rid, "epochs": rep.epochs_used, "accuracy": rep.accuracy, "kappa": rep.cohen_kappa,
               "macro_f1": rep.macro_f1}
        row.update({f"f1_{n}": v for n, v in zip(rep.stage_names, rep.f1)})
        if args.light_sleep:
            row["kappa_light_sleep"] = night["light_sleep"]["kappa"]
        rows.append(row)
    doc = {
        "nights": nights,
        "summary": metrics.dataset_summary(reports, groups if cohort else None),
        "metadata": metrics.METADATA,
    }
    if args.light_sleep:
        light = [metrics.remap_light_sleep(r) for r in reports]
        doc["light_sleep_summary"] = metrics.dataset_summary(light, groups if cohort else None)
    if args.permute:
        a_dir, b_dir = args.permute
        pa, pb = _hypnograms(a_dir), _hypnograms(b_dir)
        ids = [r for r in common if r in pa and r in pb]
        if not ids:
            raise UsageError("--permute directories share no records with the reference")
        ka = [metrics.agreement(*_aligned(refs[r], pa[r])).cohen_kappa for r in ids]
        kb = [metrics.agreement(*_aligned(refs[r], pb[r])).cohen_kappa for r in ids]
        p = stats.permutation_test(ka, kb, paired=True, n_perm=args.n_perm, seed=cfg.seed)
        doc["permutation"] = {"a": str(a_dir), "b": str(b_dir), "nights": len(ids), "mean_kappa_a": float(np.mean(ka)),
                              "mean_kappa_b": float(np.mean(kb)), "p_value": p, "n_perm": args.n_perm}
    json_path = out.with_suffix(".json")
    _dump(json_path, metrics.to_json(doc) + "\n")
    if out.suffix.lower() == ".csv":
        buf_rows = [",".join(rows[0].keys())]
        for r in rows:
            buf_rows.append(",".join("" if v is None else (repr(v) if isinstance(v, float) else str(v))
                                     for v in r.values()))
        _dump(out, "\n".join(buf_rows) + "\n")
    _write_run_manifest(json_path.parent, "evaluate", args, cfg, common, [out.name, json_path.name])
    return 0


def cmd_rem_threshold(args, cfg: GlobalConfig) -> int:
    d = Path(args.density)
    refs = _hypnograms(args.ref)
    files = sorted(d.glob("*.density.csv"))
    ids = [p.name[: -len(".density.csv")] for p in files]
    pairs = [(conf.read_density_csv(p), refs[i]) for p, i in zip(files, ids) if i in refs]
    if not pairs:
        raise UsageError("no density has a matching reference hypnogram")
    thresholds = conf.parse_sweep(args.sweep)
    rows = conf.rem_threshold_sweep([p[0] for p in pairs], [p[1] for p in pairs], thresholds)
    out = Path(args.out)
    _ensure_dir(out.parent if str(out.parent) else ".")
    _dump(out, conf.sweep_csv(rows))
    _write_run_manifest(out.parent, "rem-threshold", args, cfg, [i for i in ids if i in refs], [out.name])
    return 0


def _read_rows(path) -> list[dict]:
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            return [dict(r) for r in csv.DictReader(fh)]
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc


def cmd_fit_lme(args, cfg: GlobalConfig) -> int:
    spec = stats.LmeSpec.model(args.model or cfg.lme_model, cfg.lme_response, cfg.lme_group)
    rows = _read_rows(args.data)
    design = stats.build_design(rows, spec)
    if design.dropped:
        log.warning("%d rows dropped for missing covariates", design.dropped)
    fit = stats.lme_fit(spec, design)
    out = Path(args.out)
    _ensure_dir(out.parent if str(out.parent) else ".")
    _dump(out, fit.table_csv())
    doc = fit.to_dict()
    doc["model"] = args.model or cfg.lme_model
    doc["rows_dropped"] = design.dropped
    outputs = [out.name]
    if args.cv:
        cv = stats.lme_cv_mae(spec, design, folds=args.cv, seed=cfg.seed)
        doc["cv"] = {"folds": cv.folds, "mae": cv.mae}
        res_path = out.with_name(out.stem + ".residuals.csv")
        qq_path = out.with_name(out.stem + ".qq.csv")
        _dump(res_path, cv.residuals_csv())
        _dump(qq_path, stats.qq_csv([r["residual"] for r in cv.residuals]))
        outputs += [res_path.name, qq_path.name]
    json_path = out.with_suffix(".json")
    _dump(json_path, json.dumps(doc, indent=2, sort_keys=True) + "\n")
    _write_run_manifest(out.parent, "fit-lme", args, cfg, [str(args.data)], outputs + [json_path.name])
    return 0


def cmd_plot(args, cfg: GlobalConfig) -> int:
    density = conf.read_density_csv(args.density)
    out = Path(args.out)
    _ensure_dir(out.parent if str(out.parent) else ".")
    _dump(out, conf.density_svg(density, title=Path(args.density).name.split(".")[0]))
    _write_run_manifest(out.parent, "plot", args, cfg, [str(args.density)], [out.name])
    return 0


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hypnokit", description="Automatic sleep staging toolkit.")
    p.add_argument("--config", help="INI configuration file")
    p.add_argument("--seed", type=int, help="overrides the config and HYPNOKIT_SEED")
    p.add_argument("--verbose", action="store_true")
    p.add_argument("--version", action="version", version=f"hypnokit {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth-gen", help="write a synthetic EDF + CSV corpus")
    s.add_argument("--out", required=True)
    s.add_argument("--subjects", type=int)
    s.add_argument("--hours", type=float)
    s.add_argument("--covariates", type=int, default=0, help="also write N rows of mixed-model covariates")
    s.add_argument("--cohorts", type=int, default=2)
    s.set_defaults(func=cmd_synth_gen)

    s = sub.add_parser("preprocess", help="condition, mask and judge every EDF in a directory")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_preprocess)

    s = sub.add_parser("train", help="train (optionally with k-fold CV) and write checkpoints")
    s.add_argument("--mode", choices=("pretrain", "finetune"), required=True)
    s.add_argument("--data", required=True, help="comma-separated preprocessed dataset directories")
    s.add_argument("--cv", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--init", help="checkpoint to start from (required for finetune)")
    s.add_argument("--val-subjects", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--batch-size", type=int)
    s.add_argument("--minibatches-per-epoch", type=int)
    s.add_argument("--max-epochs", type=int)
    s.add_argument("--early-stop-patience", type=int)
    s.add_argument("--val-max-pairs", type=int)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("stage", help="hypnogram, hypnodensity and confidence for each record")
    s.add_argument("--model", required=True, help="checkpoint or ensemble manifest")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--plot", action="store_true")
    s.add_argument("--max-pairs", type=int)
    s.set_defaults(func=cmd_stage)

    s = sub.add_parser("evaluate", help="agreement, sleep metrics and period alignment")
    s.add_argument("--pred", required=True)
    s.add_argument("--ref", required=True)
    s.add_argument("--out", required=True, help="report.csv or report.json")
    s.add_argument("--light-sleep", action="store_true")
    s.add_argument("--permute", nargs=2, metavar=("A", "B"))
    s.add_argument("--n-perm", type=int, default=10000)
    s.add_argument("--groups", help="CSV mapping record_id to cohort for the summary tables")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("rem-threshold", help="REM precision/recall sweep over confidence thresholds")
    s.add_argument("--density", required=True)
    s.add_argument("--ref", required=True)
    s.add_argument("--sweep", default="0:1:0.01")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_rem_threshold)

    s = sub.add_parser("fit-lme", help="random-intercept model of per-night kappa")
    s.add_argument("--model", choices=("A", "B", "C"))
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--cv", type=int, default=0)
    s.set_defaults(func=cmd_fit_lme)

    s = sub.add_parser("plot", help="stacked-area SVG of a hypnodensity CSV")
    s.add_argument("--density", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_plot)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s")
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
        return args.func(args, cfg)
    except HypnokitError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (FloatingPointError, ArithmeticError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 4
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
