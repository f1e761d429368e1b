"""Max-overlay data augmentation for cell counts missing from training.

A formula such as ``15 = 5x(1) + 10x(1)`` says: overlay one distinct image
with 5 cells and one with 10 cells; the per-pixel maximum is a synthetic
image labelled 15.  A pool holds the alternative formulae for one target
count, and each synthetic image draws one formula uniformly from its pool.
"""
from __future__ import annotations

import csv
import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import (
    DuplicateBasis,
    FormulaSyntaxError,
    InsufficientDonors,
    MissingPool,
    MixedGroup,
    SumMismatch,
    ValidationError,
)
from .imaging import pixelwise_max, read_pgm, write_pgm
from .synth import GROUPS, DatasetManifest, ImageRecord, Provenance, Split, derive_seed

_TERM = re.compile(r"(\d+)\s*[x×\*]\s*\(\s*(\d+)\s*\)")
_FORMULA = re.compile(r"^\s*(\d+)\s*=\s*(.+?)\s*$")
_HEADER = re.compile(r"^#\s*round\s*=\s*(\d+)\s+experiment\s*=\s*(\d+)\s*$")

AUGMENT_LOG = "augment_log.csv"


@dataclass(frozen=True)
class Formula:
    target_count: int
    terms: tuple[tuple[int, int], ...]

    def __post_init__(self):
        bases = [b for b, _ in self.terms]
        if not self.terms:
            raise FormulaSyntaxError("a formula needs at least one term")
        if any(b < 1 or m < 1 for b, m in self.terms):
            raise FormulaSyntaxError("basis counts and multiplicities must be positive")
        if len(set(bases)) != len(bases):
            raise DuplicateBasis(f"repeated basis count in {self}")
        total = sum(b * m for b, m in self.terms)
        if total != self.target_count:
            raise SumMismatch(f"terms of {self} sum to {total}, not {self.target_count}")

    @property
    def n_donors(self) -> int:
        return sum(m for _, m in self.terms)

    def __str__(self) -> str:
        rhs = " + ".join(f"{b}x({m})" for b, m in self.terms)
        return f"{self.target_count} = {rhs}"


@dataclass(frozen=True)
class FormulaPool:
    target_count: int
    formulae: tuple[Formula, ...]

    def __post_init__(self):
        if not self.formulae:
            raise ValidationError(f"empty formula pool for count {self.target_count}")
        for f in self.formulae:
            if f.target_count != self.target_count:
                raise ValidationError(f"formula {f} does not belong to pool {self.target_count}")

    @property
    def basis_counts(self) -> set[int]:
        return {b for f in self.formulae for b, _ in f.terms}


def parse_formula(text: str) -> Formula:
    """Parse ``TARGET = B1x(M1) + B2x(M2) ...`` (``×`` and ``x`` both accepted)."""
    m = _FORMULA.match(text)
    if not m:
        raise FormulaSyntaxError(f"not a formula: {text!r}")
    target = int(m.group(1))
    pieces = [p.strip() for p in m.group(2).split("+")]
    terms = []
    for piece in pieces:
        tm = _TERM.fullmatch(piece)
        if not tm:
            raise FormulaSyntaxError(f"bad term {piece!r} in {text!r}")
        terms.append((int(tm.group(1)), int(tm.group(2))))
    return Formula(target, tuple(terms))


def parse_formula_file(text: str) -> dict[tuple[int, int], FormulaPool]:
    """Parse a formula fixture into ``{(round, count): FormulaPool}``.

    Formulae before the first ``# round=<r> experiment=<e>`` header belong to
    round 0.  Other ``#`` lines and blank lines are ignored.
    """
    grouped: dict[tuple[int, int], list[Formula]] = {}
    rnd = 0
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped:
            continue
        if stripped.startswith("#"):
            hm = _HEADER.match(stripped)
            if hm:
                rnd = int(hm.group(1))
            continue
        try:
            formula = parse_formula(stripped)
        except ValidationError as exc:
            raise type(exc)(f"line {lineno}: {exc}") from None
        grouped.setdefault((rnd, formula.target_count), []).append(formula)
    return {key: FormulaPool(key[1], tuple(fs)) for key, fs in grouped.items()}


def load_formula_file(path) -> dict[tuple[int, int], FormulaPool]:
    return parse_formula_file(Path(path).read_text())


def load_formula_fixtures(which: str | int) -> dict[tuple[int, int], FormulaPool]:
    """Formula pools shipped with the package for experiment 2 or 3."""
    key = str(which).lower().removeprefix("exp")
    if key not in ("2", "3"):
        raise ValidationError(f"no formula fixture for {which!r}; use 'exp2' or 'exp3'")
    text = resources.files("cellcount.data").joinpath(f"formulae_exp{key}.txt").read_text()
    return parse_formula_file(text)


def pools_for_round(pools: Mapping[tuple[int, int], FormulaPool], rnd: int) -> dict[int, FormulaPool]:
    return {count: pool for (r, count), pool in pools.items() if r == rnd}


def _check_group(records: Sequence[ImageRecord]):
    groups = {r.group for r in records}
    if len(groups) > 1:
        raise MixedGroup(f"donors span several stain/blur groups: {sorted(groups)}")
    return next(iter(groups)) if groups else None


def select_donors(
    formula: Formula, donors: Mapping[int, Sequence[ImageRecord]], rng: np.random.Generator
) -> list[ImageRecord]:
    """Pick ``m`` distinct donors for each ``(basis, m)`` term."""
    chosen: list[ImageRecord] = []
    for basis, mult in formula.terms:
        pool = list(donors.get(basis, ()))
        if len(pool) < mult:
            raise InsufficientDonors(
                f"{formula}: need {mult} images with {basis} cells, have {len(pool)}"
            )
        idx = rng.choice(len(pool), size=mult, replace=False)
        chosen.extend(pool[i] for i in sorted(idx.tolist()))
    return chosen


def synthesize_image(
    formula: Formula,
    donors: Mapping[int, Sequence[ImageRecord]],
    rng_seed,
    *,
    root: str | Path | None = None,
    image_cache: dict | None = None,
    image_path: str = "",
) -> tuple[np.ndarray, ImageRecord]:
    """Realise one formula as a max overlay of distinct donor images.

    ``donors`` maps a basis count to candidate records of one (stain, blur)
    group; their files are read relative to ``root``.  ``rng_seed`` may be
    an int or a ``numpy.random.Generator``.
    """
    all_donors = [r for recs in donors.values() for r in recs]
    group = _check_group(all_donors)
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    chosen = select_donors(formula, donors, rng)
    if group is None:
        group = chosen[0].group
    images = []
    for rec in chosen:
        path = Path(root) / rec.image_path if root is not None else Path(rec.image_path)
        if image_cache is not None:
            if str(path) not in image_cache:
                image_cache[str(path)] = read_pgm(path)
            images.append(image_cache[str(path)])
        else:
            images.append(read_pgm(path))
    image = pixelwise_max(images)
    record = ImageRecord(
        image_path=image_path,
        stain=group[0],
        blur=group[1],
        count=formula.target_count,
        split=Split.TRAIN,
        provenance=Provenance.SYNTH_DA,
        plate_id=-1,
        donors=tuple(r.image_path for r in chosen),
    )
    return image, record


def feasible_formulae(pool: FormulaPool, donors: Mapping[int, Sequence[ImageRecord]]) -> list[Formula]:
    """Formulae of ``pool`` that have enough distinct donors for every term."""
    return [
        f for f in pool.formulae
        if all(len(donors.get(b, ())) >= m for b, m in f.terms)
    ]


def augment_missing_counts(
    manifest: DatasetManifest,
    pools: Mapping[int, FormulaPool],
    images_per_missing_count: int,
    rng_seed: int,
    *,
    out_subdir: str = "augmented",
    missing_counts: Sequence[int] | None = None,
    image_cache: dict | None = None,
) -> DatasetManifest:
    """Append synthetic train images for every count absent from training.

    For each missing count and each of the six stain/blur groups,
    ``images_per_missing_count`` images are written under
    ``<root>/<out_subdir>/`` and appended as ``synth_da`` train records.
    Formulae whose multiplicities exceed the available donors of a group are
    skipped for that group; :class:`InsufficientDonors` is raised only when
    no formula of the pool is feasible.  A donor log is written alongside
    the images.
    """
    if manifest.root is None:
        raise ValidationError("augmentation needs a manifest with a root directory")
    if images_per_missing_count < 0:
        raise ValidationError("images_per_missing_count must be >= 0")
    train = manifest.train()
    train_labels = {r.count for r in train}
    if missing_counts is None:
        missing = sorted(set(manifest.count_grid) - train_labels)
    else:
        missing = sorted({int(c) for c in missing_counts})
        present = set(missing) & train_labels
        if present:
            raise ValidationError(f"counts {sorted(present)} are already in the train set")
    if images_per_missing_count == 0 or not missing:
        return manifest
    for count in missing:
        if count not in pools:
            raise MissingPool(f"no formula pool for missing count {count}")
        absent = pools[count].basis_counts - train_labels
        if absent:
            raise InsufficientDonors(
                f"pool for {count} uses basis counts {sorted(absent)} missing from training"
            )

    root = Path(manifest.root)
    (root / out_subdir).mkdir(parents=True, exist_ok=True)
    # DA donors are real/plate images only, never earlier synthetic ones
    by_group: dict = {}
    for r in train:
        if r.provenance is not Provenance.SYNTH_DA:
            by_group.setdefault(r.group, {}).setdefault(r.count, []).append(r)

    new_records: list[ImageRecord] = []
    log_rows = []
    for count in missing:
        for g_index, group in enumerate(GROUPS):
            donors = by_group.get(group, {})
            if not donors:
                continue
            options = feasible_formulae(pools[count], donors)
            if not options:
                raise InsufficientDonors(
                    f"no formula for {count} is feasible in group {group[0].value}/{group[1]}"
                )
            rng = np.random.default_rng(derive_seed(rng_seed, count, g_index))
            for k in range(images_per_missing_count):
                formula = options[int(rng.integers(len(options)))]
                rel = f"{out_subdir}/da_c{count:03d}_{group[0].value}_b{group[1]:02d}_{k:03d}.pgm"
                image, record = synthesize_image(
                    formula, donors, rng, root=root, image_cache=image_cache, image_path=rel
                )
                write_pgm(image, root / rel)
                if image_cache is not None:
                    image_cache[str(root / rel)] = image
                new_records.append(record)
                log_rows.append((rel, str(formula), ";".join(record.donors)))

    with open(root / out_subdir / AUGMENT_LOG, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("image_path", "formula", "donors"))
        writer.writerows(log_rows)
    return manifest.replace(records=list(manifest.records) + new_records)
