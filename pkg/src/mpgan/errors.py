"""Shared exception types."""


class MalformedFileError(Exception):
    """A file exists but its header or payload does not match the format."""


class ConfigError(Exception):
    """Invalid configuration: bad key, bad value, or an unsatisfiable setup
    (e.g. an empty projection slot). Maps to CLI exit code 2."""
