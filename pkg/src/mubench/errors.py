"""Typed errors raised across the benchmark harness."""


class MubenchError(Exception):
    """Base class for all harness errors."""


# --- tensor engine ---

class ShapeMismatch(MubenchError):
    pass


class NonFiniteInput(MubenchError):
    pass


class NotScalar(MubenchError):
    pass


class DetachedLoss(MubenchError):
    pass


class LabelOutOfRange(MubenchError):
    pass


# --- model zoo ---

class InvalidDescriptor(MubenchError):
    pass


class KOutOfRange(MubenchError):
    pass


class IoError(MubenchError):
    pass


class VersionMismatch(MubenchError):
    pass


class CorruptChecksum(MubenchError):
    pass


class DescriptorMismatch(MubenchError):
    pass


# --- data pipeline ---

class BadMagic(MubenchError):
    pass


class CountMismatch(MubenchError):
    pass


class TruncatedFile(MubenchError):
    pass


class RowSizeMismatch(MubenchError):
    pass


class TooFewSamples(MubenchError):
    pass


# --- unlearning methods ---

class MethodInapplicable(MubenchError):
    """Structural precondition violated (e.g. conv surgery on an MLP)."""


class NonFiniteLoss(MubenchError):
    pass


class BudgetExceeded(MubenchError):
    pass


class UnknownMethod(MubenchError):
    pass


class BadHyperparams(MubenchError):
    pass


# --- metrics ---

class EmptySplit(MubenchError):
    pass


class ZeroReference(MubenchError):
    pass


class OutOfRange(MubenchError):
    pass


class NonPositiveTime(MubenchError):
    pass


# --- attacks ---

class TooFewSamplesForAttack(MubenchError):
    pass


class DegenerateLabels(MubenchError):
    pass


class InsufficientShadowCoverage(MubenchError):
    pass


class IncompleteCoverage(MubenchError):
    pass


# --- sweeper ---

class AllTrialsFailed(MubenchError):
    pass


class SweepLogMismatch(MubenchError):
    pass


# --- ranking ---

class TooFewMethods(MubenchError):
    pass


# --- cli / config ---

class ConfigError(MubenchError):
    pass


class PhaseOrderError(MubenchError):
    pass


class MissingArtifacts(MubenchError):
    pass
