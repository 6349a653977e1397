"""Camera poses, the view ring, and sinusoidal pose features.

The training ring places four views at orthogonal azimuths starting from
90 degrees at a fixed 15 degree elevation; the evaluation protocol uses
the same constructor with 70 views. Azimuths are normalized to [0, 360),
so the fourth training azimuth is stored as 0 rather than 360.
"""

import math
from dataclasses import dataclass

import torch

from .config import RenderConfig
from .errors import ConfigError

# sinusoidal feature frequencies; azimuth gets one extra octave because it
# spans the full circle while elevation stays in a narrow band
_AZIMUTH_FREQS = (1.0, 2.0, 4.0)
_ELEVATION_FREQS = (1.0, 2.0)

POSE_FEATURE_DIM = 2 * len(_AZIMUTH_FREQS) + 2 * len(_ELEVATION_FREQS)


@dataclass(frozen=True)
class CameraPose:
    azimuth_deg: float
    elevation_deg: float

    def __post_init__(self):
        object.__setattr__(self, "azimuth_deg", float(self.azimuth_deg) % 360.0)
        if not -90.0 <= self.elevation_deg <= 90.0:
            raise ConfigError(f"elevation out of range: {self.elevation_deg}")


def camera_ring(config: RenderConfig = None, *, num_views: int = None,
                azimuth_start_deg: float = None, azimuth_span_deg: float = None,
                elevation_deg: float = None) -> list:
    """Poses at azimuth_start + k*(span/num_views), k = 0..num_views-1.

    Accepts a RenderConfig, a bare view count, or keyword overrides;
    keywords win.
    """
    if isinstance(config, int):
        config, num_views = None, (num_views if num_views is not None else config)
    base = config if config is not None else RenderConfig()
    n = num_views if num_views is not None else base.num_views
    start = azimuth_start_deg if azimuth_start_deg is not None else base.azimuth_start_deg
    span = azimuth_span_deg if azimuth_span_deg is not None else base.azimuth_span_deg
    elev = elevation_deg if elevation_deg is not None else base.elevation_deg
    if n < 1:
        raise ConfigError("camera_ring needs num_views >= 1")
    step = span / n
    return [CameraPose(start + k * step, elev) for k in range(n)]


def pose_features(pose: CameraPose) -> torch.Tensor:
    """Deterministic sinusoidal embedding of a pose; injective on any ring
    of distinct azimuths and periodic in azimuth (0 == 360)."""
    az = math.radians(pose.azimuth_deg)
    el = math.radians(pose.elevation_deg)
    feats = []
    for f in _AZIMUTH_FREQS:
        feats.append(math.sin(f * az))
        feats.append(math.cos(f * az))
    for f in _ELEVATION_FREQS:
        feats.append(math.sin(f * el))
        feats.append(math.cos(f * el))
    return torch.tensor(feats, dtype=torch.float64)


def pose_features_batch(poses) -> torch.Tensor:
    return torch.stack([pose_features(p) for p in poses], dim=0)
