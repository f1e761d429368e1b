"""Metrics, the four experiment scenarios, reports and dataset validation."""
from __future__ import annotations

import dataclasses
import datetime
import enum
import hashlib
import json
import logging
import math
import os
import platform
import shutil
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .augment import FormulaPool, augment_missing_counts, load_formula_fixtures, pools_for_round
from .errors import ConfigError, EmptyRecords, MissingFormulae, PGMError, ValidationError
from .ensemble import (
    BeliefIntervalModel,
    PredictionRecord,
    Source,
    combine,
    fit_belief_model,
)
from .imaging import read_pgm, round_half_away
from .predictors import TrainConfig, extract_features, train_classifier, train_regressor
from .synth import (
    GROUPS,
    DatasetManifest,
    ImageRecord,
    Provenance,
    Split,
    delete_counts,
    derive_seed,
    halve_training_set,
    read_manifest,
)

log = logging.getLogger(__name__)

REPORT_FORMAT = "cellcount-report/1"


# --- metrics ----------------------------------------------------------------

def _residuals(records: Sequence[PredictionRecord]) -> np.ndarray:
    if len(records) == 0:
        raise EmptyRecords("metrics need at least one prediction")
    return np.array([r.true_count - r.predicted_count for r in records], dtype=np.float64)


def rmse(records: Sequence[PredictionRecord]) -> float:
    res = _residuals(records)
    return math.sqrt(float(np.sum(res * res)) / res.size)


def mae(records: Sequence[PredictionRecord]) -> float:
    res = _residuals(records)
    return float(np.sum(np.abs(res))) / res.size


@dataclass
class MetricsReport:
    rmse: float
    mae: float
    n: int
    per_count_mae: dict[int, float]
    source_breakdown: dict[str, int]

    @classmethod
    def from_records(cls, records: Sequence[PredictionRecord]) -> "MetricsReport":
        per_count: dict[int, list[PredictionRecord]] = {}
        for r in records:
            per_count.setdefault(r.true_count, []).append(r)
        breakdown = {s.value: 0 for s in Source}
        for r in records:
            breakdown[r.source.value] += 1
        return cls(
            rmse(records),
            mae(records),
            len(records),
            {c: mae(rs) for c, rs in sorted(per_count.items())},
            breakdown,
        )

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["per_count_mae"] = {str(k): v for k, v in self.per_count_mae.items()}
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "MetricsReport":
        return cls(
            float(d["rmse"]), float(d["mae"]), int(d["n"]),
            {int(k): float(v) for k, v in d["per_count_mae"].items()},
            {str(k): int(v) for k, v in d["source_breakdown"].items()},
        )


# --- scenarios --------------------------------------------------------------

class Scenario(str, enum.Enum):
    EXP1 = "exp1"  # full training set
    EXP2 = "exp2"  # five randomly chosen counts missing
    EXP3 = "exp3"  # five consecutive counts missing
    EXP4 = "exp4"  # half of the training images removed


class Arm(str, enum.Enum):
    CE = "ce"
    DA = "da"
    ENSEMBLE = "ensemble"
    DA_ENSEMBLE = "da+ensemble"
    MSE = "mse"

    @property
    def uses_da(self) -> bool:
        return self in (Arm.DA, Arm.DA_ENSEMBLE)

    @property
    def uses_ensemble(self) -> bool:
        return self in (Arm.ENSEMBLE, Arm.DA_ENSEMBLE)


DEFAULT_DELETED_COUNTS = {
    Scenario.EXP2: ((14, 35, 57, 66, 83), (10, 31, 70, 83, 91), (18, 27, 44, 53, 91)),
    Scenario.EXP3: ((61, 66, 70, 74, 78), (70, 74, 78, 83, 87), (83, 87, 91, 96, 100)),
}
DEFAULT_ARMS = {
    Scenario.EXP1: (Arm.CE, Arm.MSE),
    Scenario.EXP2: (Arm.CE, Arm.DA, Arm.ENSEMBLE, Arm.DA_ENSEMBLE, Arm.MSE),
    Scenario.EXP3: (Arm.CE, Arm.DA, Arm.ENSEMBLE, Arm.DA_ENSEMBLE, Arm.MSE),
    Scenario.EXP4: (Arm.MSE, Arm.CE, Arm.ENSEMBLE),
}


@dataclass
class ScenarioConfig:
    scenario: Scenario
    rounds: int | None = None
    deleted_counts: tuple[tuple[int, ...], ...] | None = None
    arms: tuple[Arm, ...] | None = None
    rng_seed: int = 0
    train: TrainConfig = field(default_factory=TrainConfig)
    regressor_l2: float = 1e-4
    da_per_count: int = 6
    envelope_quantile: float | None = None
    clamp_fallback: bool = False
    per_group: bool = True
    # None -> the packaged formula fixture of the scenario
    formula_pools: Mapping[tuple[int, int], FormulaPool] | None = None

    def __post_init__(self):
        self.scenario = Scenario(self.scenario)
        if self.arms is None:
            self.arms = DEFAULT_ARMS[self.scenario]
        self.arms = tuple(Arm(a) for a in self.arms)
        if self.scenario in (Scenario.EXP2, Scenario.EXP3):
            if self.deleted_counts is None:
                self.deleted_counts = DEFAULT_DELETED_COUNTS[self.scenario]
            self.deleted_counts = tuple(tuple(int(c) for c in rd) for rd in self.deleted_counts)
            if self.rounds is None:
                self.rounds = len(self.deleted_counts)
            if len(self.deleted_counts) < self.rounds:
                raise ConfigError(f"{self.rounds} rounds but only {len(self.deleted_counts)} deletion lists")
        else:
            if self.deleted_counts:
                raise ConfigError(f"{self.scenario.value} does not take deleted counts")
            if self.rounds is None:
                self.rounds = 1 if self.scenario is Scenario.EXP1 else 3
        if self.rounds < 1:
            raise ConfigError("rounds must be positive")
        if self.scenario is Scenario.EXP4 and any(a.uses_da for a in self.arms):
            raise ConfigError("experiment 4 runs without data augmentation")

    def to_dict(self) -> dict:
        return {
            "scenario": self.scenario.value,
            "rounds": self.rounds,
            "deleted_counts": [list(d) for d in self.deleted_counts] if self.deleted_counts else None,
            "arms": [a.value for a in self.arms],
            "rng_seed": self.rng_seed,
            "train": dataclasses.asdict(self.train),
            "regressor_l2": self.regressor_l2,
            "da_per_count": self.da_per_count,
            "envelope_quantile": self.envelope_quantile,
            "clamp_fallback": self.clamp_fallback,
            "per_group": self.per_group,
            "formula_pools": "custom" if self.formula_pools is not None else "packaged",
        }


@dataclass
class RoundResult:
    index: int
    seed: int
    deleted_counts: tuple[int, ...]
    test_hash: str
    metrics: dict[Arm, MetricsReport]
    predictions: dict[Arm, list[PredictionRecord]] = field(default_factory=dict, repr=False)


@dataclass
class ScenarioResult:
    config: ScenarioConfig
    rounds: list[RoundResult]

    def summary(self) -> dict[Arm, dict[str, float]]:
        """Mean and population standard deviation of RMSE/MAE across rounds."""
        out = {}
        for arm in self.config.arms:
            r = np.array([rd.metrics[arm].rmse for rd in self.rounds])
            m = np.array([rd.metrics[arm].mae for rd in self.rounds])
            out[arm] = {
                "rmse_mean": float(r.mean()), "rmse_std": float(r.std()),
                "mae_mean": float(m.mean()), "mae_std": float(m.std()),
            }
        return out

    def mean_rmse(self, arm: Arm | str) -> float:
        return self.summary()[Arm(arm)]["rmse_mean"]

    def mean_mae(self, arm: Arm | str) -> float:
        return self.summary()[Arm(arm)]["mae_mean"]


class _FeatureCache:
    """Per-path image statistics so every image is decoded once per run."""

    def __init__(self, root: Path):
        self.root = Path(root)
        self.images: dict[str, np.ndarray] = {}
        self._feats: dict[str, np.ndarray] = {}

    def image(self, rec: ImageRecord) -> np.ndarray:
        key = str(self.root / rec.image_path)
        if key not in self.images:
            self.images[key] = read_pgm(key)
        return self.images[key]

    def features(self, rec: ImageRecord) -> np.ndarray:
        key = str(self.root / rec.image_path)
        if key not in self._feats:
            self._feats[key] = extract_features(self.image(rec))
        return self._feats[key]

    def matrix(self, records: Sequence[ImageRecord]) -> np.ndarray:
        return np.vstack([self.features(r) for r in records])

    def intensity(self, rec: ImageRecord) -> float:
        # the first feature is the average intensity
        return float(self.features(rec)[0])


def _test_hash(records: Sequence[ImageRecord], cache: _FeatureCache) -> str:
    h = hashlib.sha256()
    for r in records:
        h.update(f"{r.image_path},{r.stain.value},{r.blur},{r.count}\n".encode())
        h.update(cache.image(r).tobytes())
    return h.hexdigest()


def fit_belief_models(
    train: Sequence[ImageRecord],
    intensity_of,
    count_ceiling: float | None = None,
    quantile: float | None = None,
) -> dict[tuple, BeliefIntervalModel]:
    """One belief model per (stain, blur) group, fitted on non-synthetic records."""
    models = {}
    for stain, blur in GROUPS:
        recs = [r for r in train if r.group == (stain, blur) and r.provenance is not Provenance.SYNTH_DA]
        if not recs:
            continue
        models[(stain, blur)] = fit_belief_model(
            [intensity_of(r) for r in recs], [r.count for r in recs], stain, blur,
            count_ceiling=count_ceiling, quantile=quantile,
        )
    return models


POOLED = None  # key of the single model when groups are not separated


def fit_by_group(records: Sequence[ImageRecord], X: np.ndarray, fit, per_group: bool = True) -> dict:
    """``{(stain, blur): fit(X_g, counts_g)}``, or ``{POOLED: model}`` when not ``per_group``."""
    y = np.array([r.count for r in records])
    if not per_group:
        return {POOLED: fit(X, y)}
    keys = [r.group for r in records]
    models = {}
    for group in GROUPS:
        mask = np.array([g == group for g in keys])
        if mask.any():
            models[group] = fit(X[mask], y[mask])
    return models


def predict_by_group(models: Mapping, records: Sequence[ImageRecord], X: np.ndarray) -> np.ndarray:
    """Route each row of ``X`` to the model of its record's group."""
    if POOLED in models:
        return np.asarray(models[POOLED].predict(X))
    out = np.empty(len(records), dtype=np.float64)
    keys = [r.group for r in records]
    for group, model in models.items():
        mask = np.array([g == group for g in keys])
        if mask.any():
            out[mask] = model.predict(X[mask])
    missing = {g for g in keys if g not in models}
    if missing:
        raise ValidationError(f"no trained model for groups {sorted(missing)}")
    return out


def _round_manifest(config: ScenarioConfig, base: DatasetManifest, index: int, seed: int):
    if config.scenario in (Scenario.EXP2, Scenario.EXP3):
        deleted = config.deleted_counts[index]
        return delete_counts(base, deleted), tuple(deleted)
    if config.scenario is Scenario.EXP4:
        return halve_training_set(base, seed), ()
    return base, ()


def run_scenario(config: ScenarioConfig, dataset_dir: str | os.PathLike) -> ScenarioResult:
    """Run every round and arm of a scenario on the dataset in ``dataset_dir``.

    The manifest is validated first; violations raise :class:`ValidationError`.
    Synthetic DA images go to ``<dataset>/scratch/<scenario>_s<seed>_r<k>/``.
    """
    dataset_dir = Path(dataset_dir)
    violations = validate_manifest(dataset_dir)
    if violations:
        raise ValidationError(f"dataset failed validation: {violations[:3]} ...")
    base = read_manifest(dataset_dir)
    cache = _FeatureCache(dataset_dir)
    test = base.test()
    test_X = cache.matrix(test)
    test_y = np.array([r.count for r in test])
    test_I = np.array([cache.intensity(r) for r in test])
    test_hash = _test_hash(test, cache)
    ceiling = float(max(base.count_grid))

    fixture = None
    rounds = []
    for k in range(config.rounds):
        seed = derive_seed(config.rng_seed, k)
        manifest, deleted = _round_manifest(config, base, k, seed)
        log.info("%s round %d: %d train records", config.scenario.value, k + 1, len(manifest.train()))
        train = manifest.train()
        X = cache.matrix(train)
        y = np.array([r.count for r in train])

        needs = set(config.arms)
        cls_plain = cls_da = None
        if needs & {Arm.CE, Arm.ENSEMBLE}:
            cls_plain = fit_by_group(train, X, lambda Xg, yg: train_classifier(Xg, yg, config.train),
                                     config.per_group)
        if any(a.uses_da for a in needs):
            pools = config.formula_pools
            if pools is None:
                if fixture is None:
                    fixture = load_formula_fixtures(config.scenario.value)
                pools = fixture
            round_pools = pools_for_round(pools, k + 1)
            missing = sorted(set(base.count_grid) - manifest.train_labels())
            if missing and not round_pools:
                raise MissingFormulae(f"no formula pools for round {k + 1}")
            subdir = f"scratch/{config.scenario.value}_s{config.rng_seed}_r{k + 1}"
            shutil.rmtree(dataset_dir / subdir, ignore_errors=True)
            augmented = augment_missing_counts(
                manifest, round_pools, config.da_per_count, seed,
                out_subdir=subdir, image_cache=cache.images,
            )
            da_train = augmented.train()
            cls_da = fit_by_group(
                da_train, cache.matrix(da_train),
                lambda Xg, yg: train_classifier(Xg, yg, config.train), config.per_group,
            )
        regressor = None
        if needs & {Arm.MSE, Arm.ENSEMBLE, Arm.DA_ENSEMBLE}:
            regressor = fit_by_group(
                train, X, lambda Xg, yg: train_regressor(Xg, yg, config.regressor_l2), config.per_group
            )
        belief = None
        if any(a.uses_ensemble for a in needs):
            belief = fit_belief_models(train, cache.intensity, ceiling, config.envelope_quantile)

        reg_pred = predict_by_group(regressor, test, test_X) if regressor is not None else None
        metrics, predictions = {}, {}
        for arm in config.arms:
            if arm is Arm.MSE:
                recs = [
                    PredictionRecord(int(c), int(round_half_away(est)), Source.REGRESSOR,
                                     regressor_estimate=float(est))
                    for c, est in zip(test_y, reg_pred)
                ]
            else:
                models = cls_da if arm.uses_da else cls_plain
                cls_pred = predict_by_group(models, test, test_X)
                if arm.uses_ensemble:
                    recs = [
                        combine(int(cc), float(est), belief[rec.group].interval_at(I), int(c),
                                config.clamp_fallback)
                        for rec, cc, est, I, c in zip(test, cls_pred, reg_pred, test_I, test_y)
                    ]
                else:
                    recs = [
                        PredictionRecord(int(c), int(cc), Source.CLASSIFIER, None, int(cc))
                        for c, cc in zip(test_y, cls_pred)
                    ]
            predictions[arm] = recs
            metrics[arm] = MetricsReport.from_records(recs)
            log.info("  %-12s rmse %.3f mae %.3f", arm.value, metrics[arm].rmse, metrics[arm].mae)
        rounds.append(RoundResult(k + 1, seed, deleted, test_hash, metrics, predictions))
    return ScenarioResult(config, rounds)


# --- reports ----------------------------------------------------------------

def environment_stamp() -> dict:
    return {
        "python": platform.python_version(),
        "numpy": np.__version__,
        "platform": platform.platform(),
    }


def result_to_dict(result: ScenarioResult, timestamp: str | None = None) -> dict:
    if timestamp is None:
        timestamp = datetime.datetime.now(datetime.timezone.utc).isoformat()
    return {
        "format": REPORT_FORMAT,
        "timestamp": timestamp,
        "environment": environment_stamp(),
        "config": result.config.to_dict(),
        "rounds": [
            {
                "round": rd.index,
                "seed": rd.seed,
                "deleted_counts": list(rd.deleted_counts),
                "test_hash": rd.test_hash,
                "arms": {arm.value: m.to_dict() for arm, m in rd.metrics.items()},
            }
            for rd in result.rounds
        ],
        "summary": {arm.value: s for arm, s in result.summary().items()},
    }


def write_report(result: ScenarioResult | dict, path: str | os.PathLike) -> Path:
    """Write a JSON report (config echo, per-round tables, summary, environment)."""
    doc = result if isinstance(result, dict) else result_to_dict(result)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


def read_report(path: str | os.PathLike) -> dict:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != REPORT_FORMAT:
        raise ValidationError(f"{path} is not a {REPORT_FORMAT} report")
    return doc


def report_metrics(doc: Mapping) -> list[dict[str, MetricsReport]]:
    """Per-round ``{arm: MetricsReport}`` tables parsed back from a report."""
    return [
        {arm: MetricsReport.from_dict(m) for arm, m in rd["arms"].items()}
        for rd in doc["rounds"]
    ]


# --- validation -------------------------------------------------------------

@dataclass(frozen=True)
class Violation:
    kind: str
    image_path: str
    message: str


def validate_manifest(dataset_dir: str | os.PathLike, manifest_name: str = "manifest.csv") -> list[Violation]:
    """Check a dataset directory; an empty list means it is usable.

    Checks: the manifest parses, files exist and decode, image sizes are
    uniform, each (stain, blur, count) cell has train and test images with
    a common ratio across generated plates, and generated plates are
    complete (six records).
    """
    dataset_dir = Path(dataset_dir)
    try:
        manifest = read_manifest(dataset_dir, manifest_name)
    except (OSError, ValidationError) as exc:
        return [Violation("ManifestError", manifest_name, str(exc))]
    out: list[Violation] = []
    shape = None
    for rec in manifest.records:
        path = dataset_dir / rec.image_path
        if not path.is_file():
            out.append(Violation("FileNotFound", rec.image_path, f"{path} does not exist"))
            continue
        try:
            img = read_pgm(path)
        except PGMError as exc:
            out.append(Violation("Unreadable", rec.image_path, str(exc)))
            continue
        if shape is None:
            shape = img.shape
        elif img.shape != shape:
            out.append(Violation("SizeMismatch", rec.image_path, f"{img.shape} != {shape}"))

    cells: dict[tuple, list[int]] = {}
    plates: dict[int, int] = {}
    for rec in manifest.records:
        if rec.provenance is Provenance.SYNTH_DA:
            continue
        tally = cells.setdefault((rec.provenance, rec.stain.value, rec.blur, rec.count), [0, 0])
        tally[0 if rec.split is Split.TRAIN else 1] += 1
        if rec.provenance is Provenance.SYNTH_PLATE:
            plates[rec.plate_id] = plates.get(rec.plate_id, 0) + 1
    for key, (n_train, n_test) in sorted(cells.items()):
        if n_train == 0 or n_test == 0:
            out.append(Violation("SplitRatio", str(key[1:]), f"{n_train} train / {n_test} test"))
    # generated plates must share one ratio; real data may be split unevenly
    plate_ratios = {tuple(v) for k, v in cells.items() if k[0] is Provenance.SYNTH_PLATE}
    if len(plate_ratios) > 1:
        out.append(Violation("SplitRatio", "*", f"inconsistent train/test ratios {sorted(plate_ratios)}"))
    for pid, n in sorted(plates.items()):
        if n != len(GROUPS):
            out.append(Violation("PlateIncomplete", f"plate {pid}", f"{n} records instead of {len(GROUPS)}"))
    return out


# --- key=value configuration files ------------------------------------------

CONFIG_NAMESPACES = ("render", "train", "ensemble", "scenario")


def parse_config(text: str) -> dict[str, dict[str, str]]:
    """Parse ``namespace.key = value`` lines; ``#`` starts a comment."""
    out: dict[str, dict[str, str]] = {ns: {} for ns in CONFIG_NAMESPACES}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"line {lineno}: expected key=value")
        ns, dot, name = key.strip().partition(".")
        if not dot or ns not in CONFIG_NAMESPACES or not name:
            raise ConfigError(f"line {lineno}: key {key.strip()!r} must be one of {CONFIG_NAMESPACES}.*")
        out[ns][name] = value.strip()
    return out


def load_config(path: str | os.PathLike | None) -> dict[str, dict[str, str]]:
    if path is None:
        return parse_config("")
    return parse_config(Path(path).read_text())


def _coerce(value: str, like):
    if value.lower() in ("none", "all"):
        return None
    if like is None:
        try:
            return int(value)
        except ValueError:
            return float(value)
    if isinstance(like, bool):
        if value.lower() not in ("true", "false", "1", "0", "yes", "no"):
            raise ConfigError(f"expected a boolean, got {value!r}")
        return value.lower() in ("true", "1", "yes")
    if isinstance(like, int):
        return int(value)
    if isinstance(like, float):
        return float(value)
    if isinstance(like, tuple):
        parts = [p for p in value.replace(",", " ").split() if p]
        return tuple(type(like[0])(p) if like else float(p) for p in parts)
    if isinstance(like, dict):
        pairs = [p.split(":") for p in value.replace(",", " ").split()]
        return {int(k): float(v) for k, v in pairs}
    return value


def apply_overrides(obj, overrides: Mapping[str, str]):
    """Return a copy of dataclass ``obj`` with string overrides coerced to field types."""
    names = {f.name for f in dataclasses.fields(obj)}
    changes = {}
    for key, value in overrides.items():
        if key not in names:
            raise ConfigError(f"unknown setting {key!r} for {type(obj).__name__}")
        try:
            changes[key] = _coerce(value, getattr(obj, key))
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {exc}") from None
    return dataclasses.replace(obj, **changes)
