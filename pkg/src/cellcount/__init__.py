"""Cell counting as classification, with max-overlay augmentation and a
belief-interval ensemble, on simulated fluorescence plates."""
from .augment import (
    Formula,
    FormulaPool,
    augment_missing_counts,
    load_formula_fixtures,
    parse_formula,
    synthesize_image,
)
from .ensemble import (
    BeliefIntervalModel,
    PredictionRecord,
    Source,
    belief_interval,
    combine,
    ensemble_predict,
    fit_belief_model,
)
from .errors import CellCountError, ValidationError
from .harness import (
    Arm,
    MetricsReport,
    Scenario,
    ScenarioConfig,
    mae,
    rmse,
    run_scenario,
    validate_manifest,
    write_report,
)
from .imaging import (
    Stain,
    average_intensity,
    gaussian_blur,
    pixelwise_max,
    read_pgm,
    resize_bilinear,
    write_pgm,
)
from .predictors import (
    ClassifierModel,
    RegressorModel,
    TrainConfig,
    extract_features,
    predict_class,
    predict_regression,
    train_classifier,
    train_regressor,
)
from .synth import (
    DatasetManifest,
    ImageRecord,
    PlateRenderConfig,
    delete_counts,
    generate_dataset,
    halve_training_set,
    read_manifest,
    render_plate,
)

__version__ = "0.1.0"
