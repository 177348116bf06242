__version__ = "0.1.0"


class BSTCError(Exception):
    def __init__(self, msg: str, other: dict = {}):
        self.msg = msg
        self.other = dict(other)
        text = msg
        if other:
            text = f"{msg} ("
            for k, v in other.items():
                text += f"{k}: {v}, "
            text = text.rstrip(", ") + ")"
        super().__init__(text)


class DataError(BSTCError):
    pass


class ConfigError(DataError):
    pass


class PartitionError(DataError):
    pass


class NumericalError(BSTCError):
    pass


# exit codes of the command line
EXIT_OK = 0
EXIT_INVALID = 1
EXIT_NUMERICAL = 2
