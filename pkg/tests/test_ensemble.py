import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cellcount.ensemble import (
    BeliefIntervalModel,
    EnvelopeFit,
    Source,
    belief_interval,
    combine,
    dumps_belief_models,
    ensemble_predict,
    envelope_points,
    fit_belief_model,
    load_belief_models,
    loads_belief_models,
    save_belief_models,
)
from cellcount.errors import (
    DegenerateIntensities,
    GroupMismatch,
    ModelFormatError,
    TooFewCounts,
    ValidationError,
)
from cellcount.imaging import Stain, average_intensity, read_pgm
from cellcount.predictors import TrainConfig, extract_features, train_classifier, train_regressor
from cellcount.synth import GROUPS, read_manifest

GRID = np.array([1, 5, 10, 14, 18, 23, 27, 31, 35, 40, 44, 48, 53, 57, 61, 66, 70, 74, 78, 83, 87, 91, 96, 100])


class TestFitBeliefModel:
    def test_zero_width_envelope(self):
        m = fit_belief_model(GRID.astype(float), GRID, Stain.NUCLEI, 1, count_ceiling=1000)
        for I in (1.0, 42.0, 99.5):
            assert m.upper_envelope(I) == pytest.approx(I, abs=1e-6)
            assert m.lower_envelope(I) == pytest.approx(I, abs=1e-6)
        assert m.interval_at(42.0) == pytest.approx((42.0, 42.0), abs=1e-6)

    @pytest.mark.parametrize("stain", list(Stain))
    def test_unit_spread_closed_form(self, stain):
        # per count the dimmest point is c - 1 and the brightest c + 1, so the
        # least-squares lines through them are exactly c = I + 1 and c = I - 1
        x = np.concatenate([GRID - 1.0, GRID + 1.0, GRID + 0.3])
        y = np.concatenate([GRID, GRID, GRID])
        m = fit_belief_model(x, y, stain, 23)
        assert m.upper_envelope.degree == m.lower_envelope.degree == (1 if stain is Stain.NUCLEI else 2)
        for I in np.linspace(5, 95, 7):
            assert m.upper_envelope(I) == pytest.approx(I + 1, abs=1e-8)
            assert m.lower_envelope(I) == pytest.approx(I - 1, abs=1e-8)

    def test_unit_spread_coverage(self):
        rng = np.random.default_rng(0)
        counts = np.repeat(GRID, 5)
        x = counts + rng.uniform(-1, 1, counts.size)
        # the construction spans the full spread: include its endpoints
        x[::5] = GRID - 1.0
        x[1::5] = GRID + 1.0
        m = fit_belief_model(x, counts, Stain.NUCLEI, 1)
        test_c = rng.choice(GRID, 2000)
        test_x = test_c + rng.uniform(-1, 1, test_c.size)
        inside = [lo <= c <= hi for c, (lo, hi) in zip(test_c, map(m.interval_at, test_x))]
        assert np.mean(inside) >= 0.95

    def test_least_squares_optimality(self, default_dataset):
        man = read_manifest(default_dataset)
        for group in GROUPS:
            recs = [r for r in man.train() if r.group == group]
            x = np.array([average_intensity(read_pgm(man.path_of(r))) for r in recs])
            y = np.array([r.count for r in recs])
            m = fit_belief_model(x, y, group[0], group[1])
            uniq, lows, highs = envelope_points(x, y)
            for fit, pts in ((m.upper_envelope, lows), (m.lower_envelope, highs)):
                V = np.vander(pts, fit.degree + 1, increasing=True)
                grad = 2 * V.T @ (V @ np.array(fit.coefficients) - uniq)
                assert np.linalg.norm(grad) <= 1e-8 * np.linalg.norm(V) * np.linalg.norm(uniq)
            # count grows with intensity, so the upper envelope does too
            grid_I = np.linspace(*m.intensity_range, 50)
            assert (np.diff(m.upper_envelope(grid_I)) >= 0).all()

    def test_errors(self):
        with pytest.raises(TooFewCounts):
            fit_belief_model([1.0, 2.0, 3.0], [1, 5, 10], Stain.BODY, 1)
        with pytest.raises(TooFewCounts):
            fit_belief_model([1.0, 2.0], [1, 5], Stain.NUCLEI, 1)
        with pytest.raises(DegenerateIntensities):
            fit_belief_model([7.0] * 4, [1, 5, 10, 14], Stain.NUCLEI, 1)
        with pytest.raises(ValidationError):
            fit_belief_model([1.0, 2.0, 3.0], [1, 5, 10], Stain.NUCLEI, 1, quantile=0.5)
        with pytest.raises(ValidationError):
            fit_belief_model([1.0, 2.0, 3.0], [1, 5, 10], Stain.NUCLEI, 2)

    def test_quantile_points(self):
        x = np.array([0.0, 1.0, 2.0, 3.0, 4.0, 10, 11, 12, 13, 14])
        y = np.array([1] * 5 + [5] * 5)
        _, lows, highs = envelope_points(x, y, 0.25)
        np.testing.assert_allclose(lows, [1.0, 11.0])
        np.testing.assert_allclose(highs, [3.0, 13.0])
        _, lows, highs = envelope_points(x, y)
        np.testing.assert_allclose(lows, [0.0, 10.0])
        np.testing.assert_allclose(highs, [4.0, 14.0])


coef = st.floats(-50, 50, allow_nan=False)


class TestInterval:
    @given(st.tuples(coef, coef), st.tuples(coef, coef), st.floats(0, 255), st.floats(1, 200))
    def test_interval_contract(self, up, low, intensity, ceiling):
        m = BeliefIntervalModel((Stain.NUCLEI, 1), EnvelopeFit(1, up), EnvelopeFit(1, low), 1.0, ceiling)
        lo, hi = m.interval_at(intensity)
        assert 1.0 <= lo <= hi <= max(ceiling, 1.0)

    def test_crossover_collapses_to_midpoint(self):
        m = BeliefIntervalModel(
            (Stain.NUCLEI, 1), EnvelopeFit(1, (10.0, 0.0)), EnvelopeFit(1, (20.0, 0.0)), 1.0, 100.0
        )
        assert m.interval_at(3.0) == (15.0, 15.0)

    def test_clamping(self):
        m = BeliefIntervalModel(
            (Stain.NUCLEI, 1), EnvelopeFit(1, (0.0, 1.0)), EnvelopeFit(1, (-5.0, 1.0)), 1.0, 100.0
        )
        assert m.interval_at(2.0) == (1.0, 2.0)
        assert m.interval_at(300.0) == (100.0, 100.0)

    def test_belief_interval_uses_average_intensity(self):
        m = BeliefIntervalModel(
            (Stain.NUCLEI, 1), EnvelopeFit(1, (0.0, 1.0)), EnvelopeFit(1, (0.0, 1.0)), 1.0, 1000.0
        )
        img = np.full((4, 4), 42, np.uint8)
        assert belief_interval(m, img) == (42.0, 42.0)


class TestCombine:
    def test_examples(self):
        r = combine(40, 12.0, (35, 45))
        assert (r.predicted_count, r.source) == (40, Source.CLASSIFIER)
        r = combine(90, 41.3, (35, 45))
        assert (r.predicted_count, r.source) == (41, Source.REGRESSOR)
        r = combine(42, 0.0, (42, 42))
        assert (r.predicted_count, r.source) == (42, Source.CLASSIFIER)

    def test_fallback_rounding_and_clamp(self):
        assert combine(90, 47.5, (35, 45)).predicted_count == 48
        assert combine(90, 47.5, (35, 45), clamp_fallback=True).predicted_count == 45
        assert combine(90, -0.5, (35, 45)).predicted_count == -1

    @given(st.integers(1, 100), st.floats(-50, 150), st.floats(1, 100), st.floats(0, 30), st.integers(1, 100))
    def test_soundness_and_damage_bound(self, cls, reg, lo, width, truth):
        interval = (lo, lo + width)
        r = combine(cls, reg, interval, truth)
        inside = interval[0] <= cls <= interval[1]
        assert (r.source is Source.CLASSIFIER) == inside
        assert r.interval == interval and r.classifier_count == cls
        if not inside:
            # rounding can cost at most half a count
            assert abs(truth - r.predicted_count) <= abs(truth - reg) + 0.5


class TestEnsemblePredict:
    def test_end_to_end_and_group_check(self, default_dataset):
        man = read_manifest(default_dataset)
        group = GROUPS[0]
        train = [r for r in man.train() if r.group == group]
        test = [r for r in man.test() if r.group == group]
        imgs = {r.image_path: read_pgm(man.path_of(r)) for r in train + test}
        X = np.array([extract_features(imgs[r.image_path]) for r in train])
        y = [r.count for r in train]
        cls = train_classifier(X, y, TrainConfig(epochs=300))
        reg = train_regressor(X, y)
        belief = fit_belief_model([x[0] for x in X], y, *group)
        for r in test[:10]:
            rec = ensemble_predict(cls, reg, belief, imgs[r.image_path], group=group, true_count=r.count)
            lo, hi = rec.interval
            assert (rec.source is Source.CLASSIFIER) == (lo <= rec.classifier_count <= hi)
            assert rec.classifier_count in cls.label_set
        with pytest.raises(GroupMismatch):
            ensemble_predict(cls, reg, belief, imgs[test[0].image_path], group=(Stain.BODY, 48))


def test_belief_file_round_trip(tmp_path):
    x = np.concatenate([GRID - 1.0, GRID + 2.0])
    y = np.concatenate([GRID, GRID])
    models = {g: fit_belief_model(x, y, *g) for g in GROUPS}
    save_belief_models(models, tmp_path / "belief.txt")
    back = load_belief_models(tmp_path / "belief.txt")
    assert back == models
    assert dumps_belief_models(back) == dumps_belief_models(models)
    with pytest.raises(ModelFormatError):
        loads_belief_models("format_version 1\nkind belief\ngroups 1\ngroup nuclei 1\n")
