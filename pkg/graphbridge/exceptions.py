from copy import copy


class GraphBridgeError(Exception):
    prefix = (
        "An error occurred. If you would like to see a Python traceback, "
        "use the --debug-internals option."
    )
    exit_code = 2

    def __init__(self, message, filename=None, line_num=None):
        self.message = message
        self.filename = filename
        self.line_num = line_num
        assert isinstance(filename, (str, type(None)))
        assert isinstance(line_num, (int, type(None)))
        super().__init__(self.message)

    def __str__(self):
        if self.line_num:
            location = f"\n near {self.filename}:{self.line_num}"
        elif self.filename:
            location = f"\n in {self.filename}"
        else:
            location = ""
        return f"{self.message}{location}"


class BridgeParseError(GraphBridgeError):
    prefix = "Could not parse an input file. The error is:\n"


class BridgeValidationError(GraphBridgeError):
    pass


class BridgeStructuralError(GraphBridgeError):
    """A rate was requested for a pair of nodes that is not an edge."""


class BridgeUsageError(GraphBridgeError):
    pass


class BridgeNumericalError(GraphBridgeError):
    prefix = (
        "A numerical failure stopped the run. "
        "Use --debug-internals to see a Python traceback."
    )
    exit_code = 3


class BridgeSimulationError(BridgeNumericalError):
    pass


class BridgeStiffnessError(BridgeNumericalError):
    pass


class AbsoluteContinuityError(BridgeNumericalError):
    pass


class BridgeConvergenceError(BridgeNumericalError):
    def __init__(self, message, residual=None, **kwargs):
        self.residual = residual
        super().__init__(message, **kwargs)


class BridgeInfeasibleError(BridgeNumericalError):
    def __init__(self, message, cut=None, **kwargs):
        self.cut = cut
        super().__init__(message, **kwargs)


def fix_exception(message, e, filename=None, line_num=None, args=(), kwargs=None):
    """Add filename and linenumber to an exception if needed

    ``message`` may refer to the original message as ``{e}``."""
    if isinstance(e, GraphBridgeError):
        origmessage = e.message
    else:
        origmessage = str(e)

    message = message.format(*args, e=origmessage, **(kwargs or {}))
    if isinstance(e, GraphBridgeError):
        e = copy(e)
        if not e.filename:
            e.filename = filename
        if not e.line_num:
            e.line_num = line_num
        e.message = message
        return e
    else:
        return GraphBridgeError(message, filename, line_num)
