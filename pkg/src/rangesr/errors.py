"""Exception hierarchy shared by every module.

The CLI maps any ``RangeSRError`` to exit code 1 and prints the class name,
so the names below are part of the operator-facing contract.
"""


class RangeSRError(Exception):
    """Base class for domain errors."""


class EmptyInput(RangeSRError):
    pass


class DegenerateProjection(RangeSRError):
    pass


class ShapeMismatch(RangeSRError):
    pass


class CorruptScan(RangeSRError):
    pass


class MissingLabels(RangeSRError):
    pass


class InvalidConfig(RangeSRError):
    pass


class InvalidPenalty(RangeSRError):
    pass


class DegenerateLoss(RangeSRError):
    pass


class NonFiniteLoss(RangeSRError):
    def __init__(self, component, checkpoint=None):
        super().__init__(f"non-finite loss component: {component}")
        self.component = component
        # last good training state, when one exists
        self.checkpoint = checkpoint


class MissingClass(RangeSRError):
    def __init__(self, classes):
        super().__init__(f"classes with zero labeled pixels: {list(classes)}")
        self.classes = list(classes)


class IncompatibleCheckpoint(RangeSRError):
    pass


class DegenerateMetric(RangeSRError):
    pass


class InvalidFormat(RangeSRError):
    pass
