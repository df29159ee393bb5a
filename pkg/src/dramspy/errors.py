"""Exception types shared across the package."""


class DramSpyError(Exception):
    """Base class for all package errors."""


class ConfigError(DramSpyError, ValueError):
    """Invalid model or run configuration.

    ``field`` names the offending key so CLI users can fix their config file.
    """

    def __init__(self, field, message):
        self.field = field
        super().__init__(f"{field}: {message}")


class TemperatureRangeError(DramSpyError, ValueError):
    pass


class DecayTimeRangeError(DramSpyError, ValueError):
    pass


class InsufficientDataError(DramSpyError):
    pass


class InsufficientCandidatesError(InsufficientDataError):
    """Too few candidate indicator cells at one or more enrollment steps."""

    def __init__(self, step, temp_lo, temp_hi, found, needed):
        self.step = step
        self.temp_lo = temp_lo
        self.temp_hi = temp_hi
        self.found = found
        self.needed = needed
        super().__init__(
            f"only {found} candidate indicator cells between {temp_lo:g} and {temp_hi:g} °C "
            f"(need l={needed}); a larger DRAM region or a longer decay time t should be used"
        )


class UndefinedBERError(InsufficientDataError):
    pass


class DegenerateCalibrationError(DramSpyError, ValueError):
    pass


class RegionMismatchError(DramSpyError, ValueError):
    pass


class ProtocolError(DramSpyError, ValueError):
    """Malformed wire record. ``offset`` is the byte offset of the bad field."""

    def __init__(self, message, offset=0):
        self.offset = offset
        super().__init__(f"{message} (at byte {offset})")


class ProtocolVersionError(ProtocolError):
    pass
