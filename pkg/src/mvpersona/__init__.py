"""Two-phase disentangled personalization for a multi-view latent
diffusion backbone, with a full evaluation kit.

Subpackages are intentionally flat: config, rng, camera, schedule, text,
unet, dataio, backbone, phase1, phase2, sampler, evalkit, records,
pipeline, cli.
"""

__version__ = "0.1.0"

from .config import RunConfig  # noqa: F401
from .errors import (ConfigError, DataError, PipelineError,  # noqa: F401
                     RunFailure)
