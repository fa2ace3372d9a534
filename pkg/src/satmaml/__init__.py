"""Speaker adaptive training as meta-learning: a numpy frame classifier with
LHUC layers, batch renormalisation, learned per-layer adaptation rates and a
synthetic multi-speaker corpus."""

from .adaptation import Episode, Schedule, adapt, adapt_step, silence_filter
from .errors import (AdaptationDeclined, AggregationError, CapacityError, ConfigError, DataError,
                     DimensionError, SamplingError, SatError, UsageError)
from .nn import ModelConfig, Network, ParamStore, init_params

__version__ = "0.1.0"
