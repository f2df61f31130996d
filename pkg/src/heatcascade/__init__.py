"""Iterative heatmap-cascade keypoint estimation.

A face image and a detector box go in; 21 keypoint coordinates, per-point
visibility scores, and a yaw/pitch/roll estimate come out. The estimate is
refined over five rounds: four global rounds that re-render the current
guess as Gaussian heatmap channels stacked onto the RGB input, and a final
local round that looks at small patches around each point.
"""

from heatcascade.errors import ConfigError, DataError, TrainingDivergedError

__all__ = ["ConfigError", "DataError", "TrainingDivergedError"]

__version__ = "0.1.0"
