#!/usr/bin/env python3
"""
Exception types for WarpSR
"""

from typing import Optional, Sequence


class WarpSRError(Exception):
    """Base class for all WarpSR errors"""


class ShapeError(WarpSRError, ValueError):
    """Operand shapes do not agree"""

    def __init__(self, message: str, *shapes: Sequence[int]):
        if shapes:
            message = f"{message}: " + " vs ".join(str(tuple(s)) for s in shapes)
        super().__init__(message)
        self.shapes = tuple(tuple(s) for s in shapes)


class TapeError(WarpSRError):
    """Backward called on a tensor that is not differentiable from its tape"""


class NonFiniteError(WarpSRError, ArithmeticError):
    """NaN or Inf produced where finite values are required"""

    def __init__(self, message: str, sample_id: Optional[str] = None):
        if sample_id is not None:
            message = f"{message} (sample {sample_id})"
        super().__init__(message)
        self.sample_id = sample_id


class ConfigError(WarpSRError, ValueError):
    """Invalid run configuration"""


class CorruptFileError(WarpSRError, OSError):
    """Binary file failed magic or length checks"""


class VersionMismatchError(WarpSRError):
    """Container written by an incompatible format version"""


class ImageFormatError(WarpSRError, OSError):
    """Image file is not an 8-bit RGB image"""


class MotionBoundsError(WarpSRError, ValueError):
    """Synthetic motion exceeds the safety limit"""


class GradcheckFailure(WarpSRError):
    """One or more finite-difference checks failed"""

    def __init__(self, failed_ops: Sequence[str]):
        super().__init__(f"Gradient check failed for: {', '.join(failed_ops)}")
        self.failed_ops = list(failed_ops)


class UsageError(WarpSRError):
    """Invalid command-line usage"""
