"""Exception types shared across the package."""


class CstYoloError(Exception):
    """Base class for package errors."""


class ShapeError(CstYoloError, ValueError):
    """Tensor shapes are inconsistent with an operation's contract."""


class ContractError(CstYoloError, ValueError):
    """An operation was called outside its documented contract."""


class ConfigError(CstYoloError, ValueError):
    """A network or training configuration is invalid."""


class DataError(CstYoloError, ValueError):
    """A dataset file is missing, malformed, or inconsistent."""


class CheckpointError(CstYoloError, ValueError):
    """A checkpoint file is truncated or does not match the network."""
