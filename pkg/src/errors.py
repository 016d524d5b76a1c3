"""
Exception hierarchy.
Services raise these; handlers translate them into exit codes.
"""


class FetalError(Exception):
    """Base class for all toolkit errors."""


class DomainError(FetalError, ValueError):
    """Input outside the operation's domain."""


class ShapeError(FetalError, ValueError):
    """Array or tensor has the wrong shape."""


class ConfigError(FetalError, ValueError):
    """Invalid configuration. Message lists one problem per line."""

    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("\n".join(self.problems))


class NoForegroundError(DomainError):
    """Image has no nonzero pixel."""


class UnknownLabelSetError(DomainError):
    """Template bank has no entry for a label set."""

    def __init__(self, labels):
        self.labels = sorted(labels)
        super().__init__(f"unknown label set: {', '.join(self.labels) or '<empty>'}")


class DedupError(DomainError):
    """Upsampled replicas cannot be spread over distinct shards."""


class DegenerateDataError(DomainError):
    """Data cannot support the requested fit or normalization."""


class UndefinedMetricError(DomainError):
    """Metric or test is undefined for the given input."""


class ContractError(FetalError, AssertionError):
    """A runtime contract was violated."""


class LeakageError(FetalError, AssertionError):
    """A patient appears on both sides of a split."""
