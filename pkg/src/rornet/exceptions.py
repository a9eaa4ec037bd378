"""Exception taxonomy shared across the library.

The CLI maps these onto distinct exit codes, so keep the hierarchy flat
and the categories coarse: configuration problems, bad or corrupt data,
and numeric failures at run time.
"""


class ConfigError(ValueError):
    """Invalid architecture/training configuration or incompatible shapes."""


class NumericError(RuntimeError):
    """Non-finite values, missing gradients, or other runtime numeric faults."""


class DataError(IOError):
    """Malformed dataset files or degenerate data (e.g. zero-variance channel)."""


class CheckpointError(IOError):
    """Base class for checkpoint container problems."""


class ChecksumError(CheckpointError):
    """Stored checksum does not match the file contents."""


class VersionError(CheckpointError):
    """Unknown container version or bad magic."""


class StateNameError(CheckpointError):
    """Tensor name set in the file does not match the model's state."""
