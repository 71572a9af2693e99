"""Exception hierarchy.

``DataError`` subclasses map to CLI exit code 2; I/O problems surface as
``OSError`` (exit code 3).
"""


class DataError(Exception):
    """Input data is malformed or inconsistent."""


class AnnotationParseError(DataError):
    def __init__(self, path, byte_offset, msg):
        self.path = str(path)
        self.byte_offset = byte_offset
        super().__init__(f"{path}: invalid JSON at byte {byte_offset}: {msg}")


class StructuralError(DataError):
    def __init__(self, msg, offending_ids=()):
        self.offending_ids = list(offending_ids)
        if self.offending_ids:
            msg = f"{msg}: {self.offending_ids}"
        super().__init__(msg)


class EmptyDatasetError(DataError):
    pass


class MissingFeatureError(DataError):
    def __init__(self, instance_id):
        self.instance_id = instance_id
        super().__init__(f"no embedding for instance {instance_id}")


class PlacementError(DataError):
    pass


class DegenerateLayoutError(DataError):
    pass


class OrderingError(DataError):
    pass


class CompatibilityError(DataError):
    pass


class UnsupportedInputError(DataError):
    pass
