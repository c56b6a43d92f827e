"""adaqr: neural ensemble correction + time-adaptive quantile regression.

The package implements an end-to-end probabilistic forecasting pipeline
for wind-power ensembles: a recurrent corrector maps lagged sorted
ensembles to a compact quantile basis, a warm-started simplex runs
sliding-window quantile regression on that basis, and the surrounding
modules provide reference baselines, proper scoring rules, data cleaning,
a synthetic generator, and a spot-vs-imbalance trading backtest.
"""

from .baselines import (
    BoostConfig,
    QrfConfig,
    load_model,
    qgb_fit,
    qgb_predict,
    qrf_fit,
    qrf_predict,
    qrf_predict_levels,
    qrf_weights,
    save_model,
)
from .core import (
    DEFAULT_EVAL_LEVELS,
    EnsembleMatrix,
    ObservationSeries,
    QuantileLevels,
    check_loss,
    empirical_quantile,
    empirical_quantiles,
    sort_rows,
)
from .dataio import (
    RawDataset,
    SplitSpec,
    countertrade_filter,
    glitch_filter,
    load_csv,
    simulate,
    split,
    write_csv,
)
from .exceptions import (
    AdaqrError,
    ContractError,
    ConvergenceError,
    DataFormatError,
    DomainError,
    RankError,
    StageError,
    UnboundedError,
)
from .nncorrect import (
    LagSpec,
    LstmParams,
    TrainConfig,
    build_training_set,
    correct_ensembles,
    load_checkpoint,
    save_checkpoint,
    train,
)
from .pipeline import (
    OnlineState,
    PipelineConfig,
    PipelineResult,
    config_from_dict,
    config_to_dict,
    load_state,
    online_step,
    read_forecast_csv,
    repair_crossings,
    run_nabqr,
    save_state,
    write_forecast_csv,
)
from .scoring import (
    QuantileForecast,
    ScoreReport,
    crps_ensemble,
    crps_mean,
    mae,
    quantile_score,
    relative_score,
    reliability,
    score_ensemble,
    score_forecast,
)
from .taqr import TaqrState, run_taqr, taqr_step, warm_start
from .trading import TradeLedger, backtest, compute_offset

__version__ = "0.1.0"
