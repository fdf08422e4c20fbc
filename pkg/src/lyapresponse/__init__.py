"""Linear response of the largest Lyapunov exponent to constant forcing."""

__version__ = "0.1.0"

from .dynamics import (ConstantField, IntegratorConfig, LinearSystem, System, TrajectoryDivergence,
                       advance, rk4_joint_step, rk4_step)
from .lorenz96 import (CalibrationRejected, CalibrationResult, L96Params, Lorenz96, calibrate,
                       l96_hessian_contract, l96_jacobian, l96_rhs)
from .lyapunov import (DegenerateMap, HistoryUnderflow, MapHistory, backward_direction, forward_product,
                       incremental_map, largest_lyapunov)
from .response import (CorrelationGrid, NoPlateau, ResponseAccumulator, ResponseCurve, ResponseGridConfig,
                       accumulate_correlations, accumulate_sample, finalize, response_curve,
                       select_response_time)
