class CGFedRecError(Exception):
    """Base class for all errors raised by the package."""


class ParseError(CGFedRecError, ValueError):
    def __init__(self, line_no, message):
        self.line_no = line_no
        super().__init__(f"line {line_no}: {message}")


class EmptyDatasetError(CGFedRecError, ValueError):
    pass


class SplitError(CGFedRecError, ValueError):
    def __init__(self, user, message):
        self.user = user
        super().__init__(f"user {user}: {message}")


class SamplingError(CGFedRecError, ValueError):
    def __init__(self, user, message, shortfall=0):
        self.user = user
        self.shortfall = shortfall
        super().__init__(f"user {user}: {message}")


class NumericError(CGFedRecError, FloatingPointError):
    pass


class ParameterError(CGFedRecError, ValueError):
    pass


class ShapeError(CGFedRecError, ValueError):
    pass


class RoundError(CGFedRecError, RuntimeError):
    """Wraps a failure inside a federation round with round/client context."""

    def __init__(self, round_no, client, cause):
        self.round = round_no
        self.client = client
        where = f"round {round_no}" + ("" if client is None else f", client {client}")
        super().__init__(f"{where}: {cause}")


class UsageError(CGFedRecError, ValueError):
    """Invalid experiment configuration; ``field`` names the offending key."""

    def __init__(self, field, message):
        self.field = field
        super().__init__(f"{field}: {message}")
