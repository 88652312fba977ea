"""Exception types raised across the package."""


class StainShiftError(Exception):
    pass


class ConfigError(StainShiftError, ValueError):
    pass


class DimensionError(StainShiftError, ValueError):
    pass


class FusionShapeError(DimensionError):
    pass


class NumericError(StainShiftError, FloatingPointError):
    pass


class LoadError(StainShiftError, OSError):
    pass


class CheckpointError(StainShiftError, RuntimeError):
    pass


def check_finite(tensor, name):
    """Raise NumericError if ``tensor`` holds NaN or inf."""
    import torch

    if not torch.isfinite(tensor).all():
        bad = (~torch.isfinite(tensor)).sum().item()
        raise NumericError(f"non-finite values in {name} ({bad} entries)")
    return tensor


class DataError(StainShiftError, ValueError):
    pass
