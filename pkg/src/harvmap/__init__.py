"""harvmap: forest attribute modeling and large-area estimation from
harvester production data and airborne laser scanning."""

from ._kernels import BACKEND
from .estimation import (
    EstimateResult,
    Estimator,
    SamplePlot,
    direct_estimate,
    equivalent_sample_size,
    ma_estimate,
    relative_efficiency,
    srs_variance,
    standard_error,
    two_se_pct,
)
from .geometry import (
    Circle,
    HarvestedGridCell,
    HarvestedSegment,
    alpha_shape,
    tessellate,
)
from .harvester import (
    AllometryConfig,
    PositioningMode,
    StemProfile,
    estimate_dbh,
    estimate_height,
    jitter_positions,
    parse_harvester_file,
    tree_agb,
    tree_volume,
)
from .metrics import (
    EchoArray,
    MetricsVector,
    TerrainRaster,
    clip,
    compute_metrics,
    normalize_heights,
)
from .regression import (
    EvalPlot,
    EvalReport,
    FittedModel,
    ModelSpec,
    TimeDiffSign,
    apply_time_diff_rule,
    default_model_specs,
    me,
    me_pct,
    ols_fit,
    predict,
    r2_pred,
    rmse,
    rmse_pct,
    stratified_evaluate,
)
from .simulation import (
    MetricChannel,
    Population,
    PopulationConfig,
    SelectionRule,
    SRSDesign,
    SystematicDesign,
    draw_sample,
    generate_population,
    run_replicates,
    select_harvester_training,
)
from .trees import (
    AttributeVector,
    Dataset,
    DomainRuleSet,
    Maturity,
    PlotUnit,
    Species,
    TreeRecord,
    TreeSource,
    classify_domain,
    classify_plots,
    compute_attributes,
    dominant_species,
)

__version__ = "0.1.0"
