class MDAError(Exception):
    """Base class for every error raised by the fusion package"""


class ShapeError(MDAError, ValueError):
    """Array or tensor has the wrong number of channels or mismatched size"""


class PreconditionError(MDAError, ValueError):
    """An operation was called outside its documented domain"""


class IntegrityError(MDAError):
    """A stored archive is truncated, unreadable or fails its checksum"""


class VersionError(MDAError):
    """A stored archive was written with an unsupported format version"""


class DatasetError(MDAError):
    """A dataset root or image file is missing or unreadable"""


class EmptyManifestError(DatasetError):
    """Dataset scanning or evaluation found no usable pairs"""


class MissingFusedImageError(DatasetError):
    def __init__(self, identifiers):
        self.identifiers = list(identifiers)
        super().__init__(f"Missing fused images for: {', '.join(self.identifiers)}")


class TrainingDivergedError(MDAError):
    def __init__(self, step: int, dump_path: str):
        self.step = step
        self.dump_path = dump_path
        super().__init__(f"Non-finite loss at step {step}; diagnostics written to {dump_path}")
