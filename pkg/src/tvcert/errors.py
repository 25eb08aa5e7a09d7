class TvcertError(Exception):
    """Numeric or contract failure carrying a stable machine-readable code.

    The code (e.g. ``"grid_mismatch"``) is what the CLI prints and what the
    tests match on; ``details`` holds whatever evidence the raiser had
    (achieved mass, witness point, path id, ...).
    """

    def __init__(self, code, message="", **details):
        self.code = code
        self.details = details
        text = code if not message else f"{code}: {message}"
        super().__init__(text)


class ConfigError(TvcertError):
    """Schema or argument problem detected before any computation."""

    def __init__(self, field, message):
        self.field = field
        super().__init__("config_error", f"{field}: {message}", field=field)
