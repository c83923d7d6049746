"""Exception types shared across the package."""


class ParasinkError(Exception):
    """Base class for all package errors."""


class ValidationError(ParasinkError):
    """A profile, schema, or configuration value is out of range."""


class SchemaMismatchError(ParasinkError):
    """An event's products do not match the column store's schema."""


class CorruptionError(ParasinkError):
    """Checksum mismatch while decoding a basket."""


class FormatError(ParasinkError):
    """Malformed container or basket bytes (bad magic, truncation, bad lengths)."""


class LifecycleError(ParasinkError):
    """An operation was invoked outside its legal lifecycle window."""


class UsageError(ParasinkError):
    """An API was used against its contract (e.g. reconfiguration after first use)."""


class ConfigurationError(ParasinkError):
    """Invalid module graph or benchmark configuration."""


class ModuleExecutionError(ParasinkError):
    """A pipeline module failed while processing an event."""

    def __init__(self, module: str, event_id: int, cause: BaseException):
        super().__init__(f"module {module!r} failed on event {event_id}: {cause!r}")
        self.module = module
        self.event_id = event_id
        self.cause = cause


class VerificationError(ParasinkError):
    """Output verification found missing/duplicate events or corrupt baskets."""
