"""Exception hierarchy. Each family maps onto a CLI exit code."""

from __future__ import annotations


class SentinelError(Exception):
    exit_code = 1


class ConfigError(SentinelError):
    """One or more configuration problems; ``errors`` holds every message."""

    exit_code = 2

    def __init__(self, errors: list[str] | str):
        if isinstance(errors, str):
            errors = [errors]
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


class DataError(SentinelError):
    exit_code = 3


class ContractError(DataError, ValueError):
    """A caller broke a documented precondition."""


class ExportParseError(DataError):
    def __init__(self, group_id: str, offset: int, reason: str):
        self.group_id = group_id
        self.offset = offset
        super().__init__(f"{group_id}: malformed JSON at byte offset {offset}: {reason}")


class SchemaError(DataError):
    def __init__(self, group_id: str, reason: str = "no recognizable date field"):
        self.group_id = group_id
        super().__init__(f"{group_id}: unknown export schema ({reason})")


class TimelineFormatError(DataError):
    pass


class AlignmentError(DataError):
    def __init__(self, missing_days):
        self.missing_days = list(missing_days)
        shown = ", ".join(d.isoformat() for d in self.missing_days[:10])
        more = "" if len(self.missing_days) <= 10 else f" (+{len(self.missing_days) - 10} more)"
        super().__init__(f"event timeline does not cover {len(self.missing_days)} day(s): {shown}{more}")


class CacheInvalidError(DataError):
    """Cache was built for a different provider or dimension; re-embed."""


class CacheReadError(DataError):
    def __init__(self, message: str, record_index: int | None = None):
        self.record_index = record_index
        super().__init__(message)


class ProjectionError(DataError):
    pass


class DivergenceError(SentinelError):
    exit_code = 4

    def __init__(self, epoch: int, what: str = "loss"):
        self.epoch = epoch
        super().__init__(f"non-finite {what} at epoch {epoch}")


class ProviderError(SentinelError):
    exit_code = 5


class ProviderContractError(ProviderError):
    pass


class EmbeddingBatchError(ProviderError):
    def __init__(self, batch_index: int, cause: BaseException | str):
        self.batch_index = batch_index
        super().__init__(f"embedding batch {batch_index} failed: {cause}")


class StageError(SentinelError):
    """Wraps a failure inside ``full_run`` with the stage that raised it."""

    def __init__(self, stage: str, cause: SentinelError):
        self.stage = stage
        self.cause = cause
        self.exit_code = cause.exit_code
        super().__init__(f"stage '{stage}' failed: {cause}")
