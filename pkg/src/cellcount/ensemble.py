"""Belief intervals from intensity envelopes and the CE/MSE combination rule.

Within one (stain, blur) group the count grows with the average intensity.
For every training count we keep its dimmest and its brightest image; a
least-squares curve of count on intensity through the dimmest points gives
an upper bound for the count at a given intensity, one through the
brightest points a lower bound.  Nuclei use straight lines, body stain
quadratics.
"""
from __future__ import annotations

import enum
import os
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .errors import (
    DegenerateIntensities,
    GroupMismatch,
    ModelFormatError,
    TooFewCounts,
    ValidationError,
)
from .imaging import Stain, average_intensity, check_blur_level, round_half_away
from .predictors import ClassifierModel, RegressorModel, extract_features

FORMAT_VERSION = 1


class Source(str, enum.Enum):
    CLASSIFIER = "classifier"
    REGRESSOR = "regressor"


def degree_for(stain: Stain) -> int:
    return 1 if Stain(stain) is Stain.NUCLEI else 2


@dataclass(frozen=True)
class EnvelopeFit:
    degree: int
    coefficients: tuple[float, ...]  # a0, a1[, a2]: count = a0 + a1*I + a2*I^2

    def __call__(self, intensity):
        return np.polynomial.polynomial.polyval(intensity, self.coefficients)


def fit_envelope(intensities, counts, degree: int) -> EnvelopeFit:
    """Ordinary least squares of count on a polynomial in intensity."""
    x = np.asarray(intensities, dtype=np.float64)
    y = np.asarray(counts, dtype=np.float64)
    V = np.vander(x, degree + 1, increasing=True)
    coef, *_ = np.linalg.lstsq(V, y, rcond=None)
    if not np.all(np.isfinite(coef)):
        raise DegenerateIntensities("envelope fit produced non-finite coefficients")
    return EnvelopeFit(degree, tuple(float(c) for c in coef))


@dataclass(frozen=True)
class BeliefIntervalModel:
    group: tuple[Stain, int]
    upper_envelope: EnvelopeFit
    lower_envelope: EnvelopeFit
    count_floor: float = 1.0
    count_ceiling: float = 100.0
    intensity_range: tuple[float, float] = (0.0, 255.0)

    def interval_at(self, intensity: float) -> tuple[float, float]:
        lo = float(self.lower_envelope(intensity))
        hi = float(self.upper_envelope(intensity))
        if lo > hi:
            lo = hi = 0.5 * (lo + hi)
        lo = min(max(lo, self.count_floor), self.count_ceiling)
        hi = min(max(hi, self.count_floor), self.count_ceiling)
        return lo, hi


def envelope_points(intensities, counts, quantile: float | None = None):
    """Per-count (count, low intensity, high intensity) extremes.

    With ``quantile=q`` the q and 1-q intensity quantiles replace the
    minimum and maximum.
    """
    x = np.asarray(intensities, dtype=np.float64)
    y = np.asarray(counts)
    uniq = np.unique(y)
    lows, highs = [], []
    for c in uniq:
        vals = x[y == c]
        if quantile is None:
            lows.append(vals.min())
            highs.append(vals.max())
        else:
            lows.append(np.quantile(vals, quantile))
            highs.append(np.quantile(vals, 1.0 - quantile))
    return uniq.astype(np.float64), np.array(lows), np.array(highs)


def fit_belief_model(
    intensities: Sequence[float],
    counts: Sequence[int],
    stain: Stain,
    blur: int = 1,
    *,
    count_ceiling: float | None = None,
    quantile: float | None = None,
) -> BeliefIntervalModel:
    """Fit the upper and lower intensity envelopes of one group.

    ``count_ceiling`` defaults to the largest training count.
    """
    stain = Stain(stain)
    blur = check_blur_level(blur)
    degree = degree_for(stain)
    x = np.asarray(intensities, dtype=np.float64)
    y = np.asarray(counts)
    if x.shape != y.shape or x.size == 0:
        raise ValidationError("intensities and counts must be equal-length and non-empty")
    if quantile is not None and not 0 <= quantile < 0.5:
        raise ValidationError("envelope quantile must lie in [0, 0.5)")
    uniq, lows, highs = envelope_points(x, y, quantile)
    if uniq.size < degree + 2:
        raise TooFewCounts(
            f"degree-{degree} envelopes need at least {degree + 2} distinct counts, got {uniq.size}"
        )
    if np.ptp(x) == 0:
        raise DegenerateIntensities("all training images have the same average intensity")
    upper = fit_envelope(lows, uniq, degree)
    lower = fit_envelope(highs, uniq, degree)
    ceiling = float(uniq.max()) if count_ceiling is None else float(count_ceiling)
    return BeliefIntervalModel(
        (stain, blur), upper, lower, 1.0, ceiling, (float(x.min()), float(x.max()))
    )


def belief_interval(model: BeliefIntervalModel, image: np.ndarray) -> tuple[float, float]:
    """Clamped ``(lower, upper)`` count bounds for ``image``.

    Where the envelopes cross (only possible away from the training
    intensities) the interval collapses to their midpoint.
    """
    return model.interval_at(average_intensity(image))


@dataclass(frozen=True)
class PredictionRecord:
    true_count: int
    predicted_count: int
    source: Source
    interval: tuple[float, float] | None = None
    classifier_count: int | None = None
    regressor_estimate: float | None = None


def combine(
    classifier_count: int,
    regressor_estimate: float,
    interval: tuple[float, float],
    true_count: int = 0,
    clamp_fallback: bool = False,
) -> PredictionRecord:
    lo, hi = interval
    if lo <= classifier_count <= hi:
        predicted, source = int(classifier_count), Source.CLASSIFIER
    else:
        estimate = float(np.clip(regressor_estimate, lo, hi)) if clamp_fallback else regressor_estimate
        predicted, source = int(round_half_away(estimate)), Source.REGRESSOR
    return PredictionRecord(
        int(true_count), predicted, source, (float(lo), float(hi)),
        int(classifier_count), float(regressor_estimate),
    )


def ensemble_predict(
    classifier: ClassifierModel,
    regressor: RegressorModel,
    belief_model: BeliefIntervalModel,
    image: np.ndarray,
    *,
    group: tuple[Stain, int] | None = None,
    true_count: int = 0,
    clamp_fallback: bool = False,
) -> PredictionRecord:
    """Trust the classifier inside the belief interval, else the regressor.

    The interval is closed.  The regressor fallback is rounded half away from
    zero and, unless ``clamp_fallback``, not clamped into the interval.
    ``group`` is the image's (stain, blur); a mismatch with the belief model
    raises :class:`GroupMismatch`.
    """
    if group is not None and (Stain(group[0]), int(group[1])) != belief_model.group:
        raise GroupMismatch(f"belief model is for {belief_model.group}, image is {group}")
    feats = extract_features(image)
    cls_count = int(classifier.predict(feats)[0])
    reg_est = float(regressor.predict(feats)[0])
    return combine(cls_count, reg_est, belief_interval(belief_model, image), true_count, clamp_fallback)


# --- plain-text belief model files ----------------------------------------

def dumps_belief_models(models: Mapping[tuple[Stain, int], BeliefIntervalModel]) -> str:
    lines = [f"format_version {FORMAT_VERSION}", "kind belief", f"groups {len(models)}"]
    for (stain, blur), m in sorted(models.items(), key=lambda kv: (kv[0][0].value, kv[0][1])):
        lines += [
            f"group {Stain(stain).value} {blur}",
            f"degree {m.upper_envelope.degree}",
            "upper " + " ".join(repr(c) for c in m.upper_envelope.coefficients),
            "lower " + " ".join(repr(c) for c in m.lower_envelope.coefficients),
            f"floor {m.count_floor!r}",
            f"ceiling {m.count_ceiling!r}",
            f"intensity_range {m.intensity_range[0]!r} {m.intensity_range[1]!r}",
        ]
    return "\n".join(lines) + "\n"


def loads_belief_models(text: str) -> dict[tuple[Stain, int], BeliefIntervalModel]:
    lines = [ln.split() for ln in text.splitlines() if ln.strip()]
    try:
        header = {ln[0]: ln[1:] for ln in lines[:3]}
        if int(header["format_version"][0]) != FORMAT_VERSION or header["kind"] != ["belief"]:
            raise ModelFormatError("not a version-1 belief model file")
        n_groups = int(header["groups"][0])
        models = {}
        body = lines[3:]
        for k in range(n_groups):
            block = {ln[0]: ln[1:] for ln in body[7 * k : 7 * k + 7]}
            group = (Stain(block["group"][0]), int(block["group"][1]))
            degree = int(block["degree"][0])
            upper = EnvelopeFit(degree, tuple(float(v) for v in block["upper"]))
            lower = EnvelopeFit(degree, tuple(float(v) for v in block["lower"]))
            models[group] = BeliefIntervalModel(
                group, upper, lower, float(block["floor"][0]), float(block["ceiling"][0]),
                tuple(float(v) for v in block["intensity_range"]),
            )
        return models
    except (KeyError, IndexError, ValueError) as exc:
        raise ModelFormatError(f"malformed belief model file: {exc}") from None


def save_belief_models(models, path: str | os.PathLike) -> None:
    with open(path, "w") as fh:
        fh.write(dumps_belief_models(models))


def load_belief_models(path: str | os.PathLike):
    with open(path) as fh:
        return loads_belief_models(fh.read())
