"""Command-line entry point: ``cellcount <subcommand> [options]``.

Exit status is 0 on success, 1 when input fails validation and 2 on any
other runtime error.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .augment import augment_missing_counts, load_formula_file, load_formula_fixtures, pools_for_round
from .ensemble import PredictionRecord, Source, combine, load_belief_models, save_belief_models
from .errors import CellCountError, ConfigError, ValidationError
from .harness import (
    Arm,
    MetricsReport,
    ScenarioConfig,
    apply_overrides,
    fit_belief_models,
    load_config,
    result_to_dict,
    run_scenario,
    validate_manifest,
    write_report,
)
from .imaging import Stain, average_intensity, read_pgm, round_half_away
from .predictors import (
    TrainConfig,
    extract_features,
    load_model,
    save_model,
    train_classifier,
    train_regressor,
)
from .synth import GROUPS, PlateRenderConfig, delete_counts, generate_dataset, read_manifest, write_manifest

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2
BELIEF_FILE = "belief.txt"


@dataclasses.dataclass
class EnsembleSettings:
    envelope_quantile: float | None = None
    clamp_fallback: bool = False


class Settings:
    """Config file values merged under command-line flags."""

    def __init__(self, path):
        raw = load_config(path)
        self.render = apply_overrides(PlateRenderConfig(), raw["render"])
        self.train = apply_overrides(TrainConfig(), raw["train"])
        self.ensemble = apply_overrides(EnsembleSettings(), raw["ensemble"])
        self.scenario = raw["scenario"]


def _model_path(models_dir: Path, kind: str, group) -> Path:
    stain, blur = group
    return models_dir / f"{kind}_{Stain(stain).value}_b{blur:02d}.txt"


def _load_group_models(models_dir: Path, kind: str) -> dict:
    models = {}
    for group in GROUPS:
        path = _model_path(models_dir, kind, group)
        if path.exists():
            models[group] = load_model(path)
    if not models:
        raise ValidationError(f"no {kind} models in {models_dir}; run `cellcount train --kind {kind}`")
    return models


def _dataset(args) -> Path:
    if args.dataset is None:
        raise ValidationError("--dataset is required")
    return Path(args.dataset)


def _models_dir(args) -> Path:
    return Path(args.models) if args.models else _dataset(args) / "models"


def _check_dataset(dataset: Path, manifest_name: str) -> None:
    violations = validate_manifest(dataset, manifest_name)
    for v in violations:
        print(f"{v.kind}: {v.image_path}: {v.message}", file=sys.stderr)
    if violations:
        raise ValidationError(f"{len(violations)} manifest violation(s) in {dataset}")


def _parse_counts(text: str | None) -> list[int]:
    if not text:
        return []
    return [int(t) for t in text.replace(",", " ").split()]


# --- subcommands --------------------------------------------------------------

def cmd_synth(args, settings: Settings) -> int:
    ratio = tuple(int(t) for t in args.split.split(":"))
    if len(ratio) != 2:
        raise ValidationError("--split must look like 2:1")
    manifest = generate_dataset(
        _dataset(args), settings.render, images_per_count_per_group=args.per_count,
        split_ratio=ratio, rng_seed=args.seed,
    )
    print(f"wrote {len(manifest.records)} images to {manifest.root}")
    return EXIT_OK


def cmd_augment(args, settings: Settings) -> int:
    dataset = _dataset(args)
    _check_dataset(dataset, args.manifest)
    manifest = read_manifest(dataset, args.manifest)
    if args.delete:
        manifest = delete_counts(manifest, _parse_counts(args.delete))
    if args.formulae in ("exp2", "exp3"):
        pools = load_formula_fixtures(args.formulae)
    else:
        pools = load_formula_file(args.formulae)
    augmented = augment_missing_counts(
        manifest, pools_for_round(pools, args.round), args.per_count, args.seed,
        out_subdir=args.out_subdir,
    )
    write_manifest(augmented, dataset, args.output)
    added = len(augmented.records) - len(manifest.records)
    print(f"added {added} synthetic images; manifest written to {dataset / args.output}")
    return EXIT_OK


def _train_records(dataset: Path, manifest_name: str):
    manifest = read_manifest(dataset, manifest_name)
    train = manifest.train()
    X = np.vstack([extract_features(read_pgm(manifest.path_of(r))) for r in train])
    return manifest, train, X


def cmd_train(args, settings: Settings) -> int:
    dataset = _dataset(args)
    _check_dataset(dataset, args.manifest)
    _, train, X = _train_records(dataset, args.manifest)
    y = np.array([r.count for r in train])
    out = _models_dir(args)
    out.mkdir(parents=True, exist_ok=True)
    for group in GROUPS:
        mask = np.array([r.group == group for r in train])
        if not mask.any():
            continue
        if args.kind == "ce":
            model = train_classifier(X[mask], y[mask], settings.train)
            detail = f"{model.label_set.size} labels, final loss {model.final_loss:.4f}"
        else:
            model = train_regressor(X[mask], y[mask], args.l2)
            detail = f"l2 {args.l2}"
        path = _model_path(out, args.kind, group)
        save_model(model, path)
        print(f"{path}: {detail}")
    return EXIT_OK


def cmd_fit_ensemble(args, settings: Settings) -> int:
    dataset = _dataset(args)
    _check_dataset(dataset, args.manifest)
    manifest = read_manifest(dataset, args.manifest)
    quantile = args.envelope_quantile if args.envelope_quantile is not None else settings.ensemble.envelope_quantile
    models = fit_belief_models(
        manifest.train(), lambda r: average_intensity(read_pgm(manifest.path_of(r))),
        float(max(manifest.count_grid)), quantile,
    )
    out = _models_dir(args)
    out.mkdir(parents=True, exist_ok=True)
    save_belief_models(models, out / BELIEF_FILE)
    print(f"wrote {len(models)} belief models to {out / BELIEF_FILE}")
    return EXIT_OK


def _predict_one(image, group, models_dir: Path, clamp: bool, true_count: int = 0) -> PredictionRecord:
    feats = extract_features(image)
    cls = _load_group_models(models_dir, "ce").get(group)
    reg = _load_group_models(models_dir, "mse").get(group)
    if cls is None or reg is None:
        raise ValidationError(f"no models for group {group[0].value}/{group[1]}")
    belief = load_belief_models(models_dir / BELIEF_FILE).get(group)
    if belief is None:
        raise ValidationError(f"no belief model for group {group[0].value}/{group[1]}")
    return combine(int(cls.predict(feats)[0]), float(reg.predict(feats)[0]),
                   belief.interval_at(average_intensity(image)), true_count, clamp)


def cmd_predict(args, settings: Settings) -> int:
    group = (Stain(args.stain), int(args.blur))
    models_dir = Path(args.models) if args.models else (
        Path(args.dataset) / "models" if args.dataset else Path("models")
    )
    clamp = args.clamp_fallback or settings.ensemble.clamp_fallback
    rec = _predict_one(read_pgm(args.image), group, models_dir, clamp)
    print(json.dumps({
        "image": str(args.image),
        "count": rec.predicted_count,
        "source": rec.source.value,
        "interval": list(rec.interval),
        "classifier_count": rec.classifier_count,
        "regressor_estimate": rec.regressor_estimate,
    }, indent=2))
    return EXIT_OK


def cmd_evaluate(args, settings: Settings) -> int:
    dataset = _dataset(args)
    _check_dataset(dataset, args.manifest)
    manifest = read_manifest(dataset, args.manifest)
    models_dir = _models_dir(args)
    test = manifest.test()
    arm = Arm(args.arm)
    cls = _load_group_models(models_dir, "ce") if arm is not Arm.MSE else None
    reg = _load_group_models(models_dir, "mse") if arm in (Arm.MSE, Arm.ENSEMBLE) else None
    belief = load_belief_models(models_dir / BELIEF_FILE) if arm is Arm.ENSEMBLE else None
    clamp = args.clamp_fallback or settings.ensemble.clamp_fallback
    records = []
    for r in test:
        image = read_pgm(manifest.path_of(r))
        feats = extract_features(image)
        if arm is Arm.MSE:
            est = float(reg[r.group].predict(feats)[0])
            records.append(PredictionRecord(r.count, int(round_half_away(est)), Source.REGRESSOR,
                                            regressor_estimate=est))
        elif arm is Arm.ENSEMBLE:
            records.append(combine(
                int(cls[r.group].predict(feats)[0]), float(reg[r.group].predict(feats)[0]),
                belief[r.group].interval_at(average_intensity(image)), r.count, clamp,
            ))
        else:
            c = int(cls[r.group].predict(feats)[0])
            records.append(PredictionRecord(r.count, c, Source.CLASSIFIER, None, c))
    report = MetricsReport.from_records(records)
    doc = {"format": "cellcount-evaluation/1", "arm": arm.value, "models": str(models_dir),
           "metrics": report.to_dict()}
    path = write_report(doc, dataset / "reports" / f"evaluate_{arm.value}.json")
    print(f"{arm.value}: RMSE {report.rmse:.4f}  MAE {report.mae:.4f}  (n={report.n})  -> {path}")
    return EXIT_OK


def cmd_experiment(args, settings: Settings) -> int:
    dataset = _dataset(args)
    overrides = dict(settings.scenario)
    overrides.pop("scenario", None)
    cfg = ScenarioConfig(args.scenario, rng_seed=args.seed, train=settings.train,
                         envelope_quantile=settings.ensemble.envelope_quantile,
                         clamp_fallback=settings.ensemble.clamp_fallback)
    cfg = apply_overrides(cfg, overrides)
    changes = {}
    if args.rounds is not None:
        changes["rounds"] = args.rounds
    if args.arms:
        changes["arms"] = tuple(a.strip() for a in args.arms.split(","))
    if args.per_count is not None:
        changes["da_per_count"] = args.per_count
    if args.formulae:
        changes["formula_pools"] = load_formula_file(args.formulae)
    if args.envelope_quantile is not None:
        changes["envelope_quantile"] = args.envelope_quantile
    if args.clamp_fallback:
        changes["clamp_fallback"] = True
    cfg = dataclasses.replace(cfg, **changes)
    result = run_scenario(cfg, dataset)
    doc = result_to_dict(result)
    path = write_report(doc, dataset / "reports" / f"{cfg.scenario.value}_s{cfg.rng_seed}.json")
    print(f"{cfg.scenario.value}: {len(result.rounds)} round(s)")
    for arm, s in result.summary().items():
        print(f"  {arm.value:<12} RMSE {s['rmse_mean']:.3f} ± {s['rmse_std']:.3f}"
              f"   MAE {s['mae_mean']:.3f} ± {s['mae_std']:.3f}")
    print(f"report: {path}")
    return EXIT_OK


# --- argument parsing -----------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cellcount", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--seed", type=int, default=0, help="master RNG seed")
    parser.add_argument("--dataset", help="dataset directory")
    parser.add_argument("--config", help="key=value config file (render.*, train.*, ensemble.*, scenario.*)")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="render a simulated dataset")
    p.add_argument("--per-count", type=int, default=5, help="images per count per stain/blur group")
    p.add_argument("--split", default="2:1", help="train:test ratio")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("augment", help="synthesize images for counts missing from training")
    p.add_argument("--formulae", required=True, help="formula file, or exp2 / exp3 for the packaged pools")
    p.add_argument("--round", type=int, default=1, help="round section of the formula file")
    p.add_argument("--per-count", type=int, default=6, help="synthetic images per missing count per group")
    p.add_argument("--delete", help="comma-separated counts to remove from training first")
    p.add_argument("--manifest", default="manifest.csv")
    p.add_argument("--output", default="manifest_da.csv", help="name of the augmented manifest")
    p.add_argument("--out-subdir", default="augmented")
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("train", help="train per-group classifiers (ce) or regressors (mse)")
    p.add_argument("--kind", choices=("ce", "mse"), required=True)
    p.add_argument("--manifest", default="manifest.csv")
    p.add_argument("--models", help="output directory (default <dataset>/models)")
    p.add_argument("--l2", type=float, default=1e-4, help="ridge penalty for --kind mse")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("fit-ensemble", help="fit per-group belief-interval models")
    p.add_argument("--manifest", default="manifest.csv")
    p.add_argument("--models")
    p.add_argument("--envelope-quantile", type=float)
    p.set_defaults(func=cmd_fit_ensemble)

    p = sub.add_parser("predict", help="count cells in one image")
    p.add_argument("image")
    p.add_argument("--stain", choices=[s.value for s in Stain], required=True)
    p.add_argument("--blur", type=int, required=True)
    p.add_argument("--models")
    p.add_argument("--clamp-fallback", action="store_true")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="score trained models on the test split")
    p.add_argument("--arm", choices=("ce", "mse", "ensemble"), default="ensemble")
    p.add_argument("--manifest", default="manifest.csv")
    p.add_argument("--models")
    p.add_argument("--clamp-fallback", action="store_true")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("experiment", help="run one of the four experiment scenarios")
    p.add_argument("--scenario", choices=("exp1", "exp2", "exp3", "exp4"), required=True)
    p.add_argument("--rounds", type=int)
    p.add_argument("--arms", help="comma-separated subset of ce,da,ensemble,da+ensemble,mse")
    p.add_argument("--per-count", type=int, help="synthetic images per missing count per group")
    p.add_argument("--formulae", help="formula file replacing the packaged pools")
    p.add_argument("--envelope-quantile", type=float)
    p.add_argument("--clamp-fallback", action="store_true")
    p.set_defaults(func=cmd_experiment)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        settings = Settings(args.config)
        return args.func(args, settings)
    except (ValidationError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (CellCountError, OSError, RuntimeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
