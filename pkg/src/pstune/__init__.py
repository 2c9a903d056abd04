"""Online tuning of system settings for a simulated parameter-server training job."""

from .acquisition import (
    AcquisitionResult,
    expected_improvement,
    expected_improvement_lognormal,
    orthogonal_sample,
    propose_next,
    random_sample,
)
from .domain import (
    KnobSpace,
    KnobSpec,
    MetricRecord,
    MetricsRepository,
    SegmentSpan,
    SystemSetting,
    TrainingTriple,
    build_training_triples,
    encode_setting,
)
from .errors import (
    DegenerateSegmentWarning,
    DivergenceError,
    FitError,
    InsufficientDataError,
    NumericalError,
    ProtocolError,
    PSTuneError,
    SequencingError,
    ValidationError,
)
from .gp import GaussianProcessModel, KernelParams
from .kernels import BACKEND
from .progress import (
    BoundedSupremum,
    ConvergenceFit,
    RemainingEstimate,
    StatefulFirstLoss,
    StatelessConstant,
    estimate_remaining_time,
    fit_H,
)
from .reconfig import ReconfigAction, estimate_reconfig_cost, plan_reconfig, reconfigure
from .tuner import Job, JobReport, TunerConfig, rank_evaluation, run_fixed, run_job

__version__ = "0.1.0"
