"""State-estimation toolkit: classical RTS smoothing and the RTSNet hybrid.

Modules:
  ssmodel   state-space models, simulation, Lorenz discretization, datasets
  classic   Kalman filter / RTS smoother (extended variants) + batch MAP oracle
  neural    reverse-mode tape, dense/GRU layers, Adam, checkpoints
  hybrid    RTSNet: the smoother recursion with learned recurrent gains
  training  end-to-end training, evaluation, metrics
  harness   CLI and the scripted experiments
"""

import os as _os
import sys as _sys

# The kernels here are thousands of tiny matmuls; BLAS thread pools only add
# contention at these sizes.  Respect explicit user settings.
if "numpy" not in _sys.modules:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        _os.environ.setdefault(_var, "1")
else:  # numpy already imported; fall back to runtime limits if available
    try:
        from threadpoolctl import threadpool_limits as _tpl

        _tpl(limits=1, user_api="blas")
    except Exception:
        pass

from .ssmodel import (
    LorenzConfig,
    NoiseConfig,
    StateSpaceModel,
    Trajectory,
    TrajectoryDataset,
    canonical_linear_model,
    generate_decimated_dataset,
    linear_model,
    lorenz_model,
    numerical_jacobian,
    rotate_observation,
    simulate_dataset,
    simulate_trajectory,
)
from .classic import (
    FilterStep,
    SmoothedStep,
    SmootherOutput,
    batch_map_oracle,
    kalman_filter,
    rts_smooth,
)
from .hybrid import RtsNetModel, count_params, rtsnet_forward, rtsnet_smooth
from .training import TrainConfig, evaluate, train

__all__ = [
    "LorenzConfig",
    "NoiseConfig",
    "StateSpaceModel",
    "Trajectory",
    "TrajectoryDataset",
    "canonical_linear_model",
    "generate_decimated_dataset",
    "linear_model",
    "lorenz_model",
    "numerical_jacobian",
    "rotate_observation",
    "simulate_dataset",
    "simulate_trajectory",
    "FilterStep",
    "SmoothedStep",
    "SmootherOutput",
    "batch_map_oracle",
    "kalman_filter",
    "rts_smooth",
    "RtsNetModel",
    "count_params",
    "rtsnet_forward",
    "rtsnet_smooth",
    "TrainConfig",
    "evaluate",
    "train",
]

__version__ = "0.1.0"
