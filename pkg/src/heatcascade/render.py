"""Render a current shape estimate into network input channels.

The input to each global regression round is the RGB image (scaled to
[0, 1]) stacked with one Gaussian response map per keypoint, peaked at the
current coordinate estimate. Points whose visibility score falls below the
gating threshold get an all-zero channel, so the network sees "no belief"
rather than a misleading peak.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from heatcascade.geometry import N_LANDMARKS, Shape


@dataclass(frozen=True)
class RenderConfig:
    """Raster geometry and Gaussian parameters for input rendering."""

    width: int = 224
    height: int = 224
    sigma: float = 5.0
    amplitude: float = 1.0
    vis_threshold: float = 0.03

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError(f"raster sides must be >= 1, got {self.width}x{self.height}")
        if not self.sigma > 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")
        if not self.amplitude > 0:
            raise ValueError(f"amplitude must be positive, got {self.amplitude}")
        if not 0.0 <= self.vis_threshold <= 1.0:
            raise ValueError(f"vis_threshold must lie in [0, 1], got {self.vis_threshold}")


@dataclass(frozen=True, eq=False)
class RenderedInput:
    """Stacked network input: 3 RGB channels then one heatmap per keypoint."""

    channels: np.ndarray

    def __post_init__(self):
        ch = np.asarray(self.channels)
        if ch.ndim != 3 or ch.shape[0] != 3 + N_LANDMARKS:
            raise ValueError(
                f"expected ({3 + N_LANDMARKS}, H, W) channels, got array of shape {ch.shape}"
            )
        object.__setattr__(self, "channels", ch)
        ch.setflags(write=False)

    @property
    def rgb(self) -> np.ndarray:
        return self.channels[:3]

    @property
    def heatmaps(self) -> np.ndarray:
        return self.channels[3:]


def render(
    image: np.ndarray, shape: Shape, visibility, cfg: RenderConfig
) -> RenderedInput:
    """Build the (3 + N, H, W) input raster for one face.

    image must already be at raster resolution, HxWx3, uint8 or float in
    [0, 1]. visibility entries below cfg.vis_threshold zero the point's
    channel; others render with unit-strength peaks regardless of the score
    (the score gates, it does not scale). Every rendered point needs concrete
    finite coordinates.
    """
    if image.shape != (cfg.height, cfg.width, 3):
        raise ValueError(
            f"image must be {cfg.height}x{cfg.width}x3 to match the raster, got {image.shape}"
        )
    if image.dtype == np.uint8:
        rgb = image.astype(np.float64) / 255.0
    else:
        rgb = np.asarray(image, dtype=np.float64)
        if not np.isfinite(rgb).all():
            raise ValueError("float image pixels must be finite")
        if rgb.min() < 0.0 or rgb.max() > 1.0:
            raise ValueError("float image pixels must lie in [0, 1]")

    vis = np.asarray(visibility, dtype=np.float64).reshape(-1)
    if vis.shape != (N_LANDMARKS,):
        raise ValueError(f"visibility needs {N_LANDMARKS} entries, got {vis.shape[0]}")

    out = np.zeros((3 + N_LANDMARKS, cfg.height, cfg.width), dtype=np.float64)
    out[:3] = rgb.transpose(2, 0, 1)

    cols = np.arange(cfg.width, dtype=np.float64)
    rows = np.arange(cfg.height, dtype=np.float64)
    inv = 1.0 / (2.0 * cfg.sigma * cfg.sigma)
    pts = shape.points
    for i in range(N_LANDMARKS):
        if vis[i] < cfg.vis_threshold:
            continue
        x, y = pts[i]
        if not (np.isfinite(x) and np.isfinite(y)):
            raise ValueError(f"landmark {i} is gated on but has no finite coordinates")
        gx = np.exp(-((cols - x) ** 2) * inv)
        gy = np.exp(-((rows - y) ** 2) * inv)
        out[3 + i] = cfg.amplitude * np.outer(gy, gx)
    return RenderedInput(out)
