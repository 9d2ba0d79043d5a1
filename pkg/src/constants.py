#!/usr/bin/env python3
"""
Constants for WarpSR
"""


class TapNames:
    """Named taps of the frozen feature network"""
    POOL3 = 'pool3'
    POOL4 = 'pool4'
    FC7 = 'fc7'
    ALL = (POOL3, POOL4, FC7)


class LossModes:
    """Loss mode presets, one per perceptual-loss training regime"""
    PIXEL = 'pixel'
    PIXEL_POOL3_POOL4 = 'pixel+pool3+pool4'
    PIXEL_FC7 = 'pixel+fc7'

    ACTIVE_TAPS = {
        PIXEL: (),
        PIXEL_POOL3_POOL4: (TapNames.POOL3, TapNames.POOL4),
        PIXEL_FC7: (TapNames.FC7,),
    }


class LambdaPresets:
    """Feature-term weights for the two dataset regimes"""
    LFW = 'lfw'
    YTF = 'ytf'


class SectionNames:
    """Section name prefixes inside checkpoint containers"""
    CENTRAL = 'F0'
    ADJACENT = 'Fadj'
    WARP = 'P'
    RECONSTRUCTION = 'R'
    FEATURE_NET = 'vgg'
    ADAM_M = 'adam/m'
    ADAM_V = 'adam/v'


class FileMagic:
    """Magic bytes of the binary formats"""
    TENSOR = b'WSR1'
    CONTAINER = b'WSRC'
    CONTAINER_VERSION = 1


class ExitCodes:
    """CLI exit-code taxonomy"""
    OK = 0
    USAGE = 1
    IO = 2
    NUMERIC = 3
    GRADCHECK = 4


class BaselineNames:
    """Report rows that are not trained variants"""
    GROUND_TRUTH = 'gt'
    BICUBIC = 'bicubic'


class LogMessages:
    """Standard log message templates"""
    NON_FINITE_LOSS = "Non-finite loss for sample {sample_id}"
    CHECKPOINT_SAVED = "Saved checkpoint to {path}"
    CONFIG_HASH_MISMATCH = "Checkpoint config hash {found} differs from expected {expected}"
    DATASET_WRITTEN = "Wrote {count} samples to {path}"
    GRADCHECK_RESULT = "{op}: max relative error {error:.3e} ({status})"
