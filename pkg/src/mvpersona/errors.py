"""Exception types shared across the pipeline.

The CLI maps these onto exit codes (config 2, data 3, runtime 4), so
raising the right class matters more than the message text.
"""


class PipelineError(Exception):
    """Base class for everything raised deliberately by this package."""

    exit_code = 4


class ConfigError(PipelineError):
    """Bad configuration value, file, or flag combination."""

    exit_code = 2


class DataError(PipelineError):
    """Missing or malformed input data (images, masks, manifests, records)."""

    exit_code = 3


class RunFailure(PipelineError):
    """A stage failed at runtime; message carries stage attribution."""

    exit_code = 4


class CheckpointVersionError(RunFailure):
    """Checkpoint format-version mismatch; refuse rather than guess."""
