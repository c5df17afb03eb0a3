class AsymFusionError(Exception):
    """Base class for every error raised by this package."""

    exit_code = 1

    def to_record(self):
        """Machine-readable form printed by the command line."""
        return {'error': type(self).__name__, 'message': str(self)}


class DimensionError(AsymFusionError, ValueError):
    def __init__(self, axis, expected, actual, where=''):
        self.axis = axis
        self.expected = expected
        self.actual = actual
        self.where = where
        prefix = f"{where}: " if where else ''
        super().__init__(f"{prefix}dimension mismatch on axis {axis}: expected {expected}, got {actual}")

    def to_record(self):
        record = super().to_record()
        record.update(axis=self.axis, expected=str(self.expected), actual=str(self.actual))
        return record


class IndexRangeError(AsymFusionError, IndexError):
    pass


class GraphError(AsymFusionError):
    pass


class ConfigError(AsymFusionError, ValueError):
    exit_code = 3


class IntegrityError(AsymFusionError):
    exit_code = 4

    def __init__(self, tensor, message):
        self.tensor = tensor
        super().__init__(f"{tensor}: {message}")

    def to_record(self):
        record = super().to_record()
        record['tensor'] = self.tensor
        return record


class NaNLossError(AsymFusionError, FloatingPointError):
    exit_code = 5

    def __init__(self, step, parts):
        self.step = step
        self.parts = dict(parts)
        bad = ', '.join(k for k, v in self.parts.items() if v != v)
        super().__init__(f"non-finite loss at step {step} (NaN terms: {bad or 'none'})")

    def to_record(self):
        record = super().to_record()
        record.update(step=self.step, parts={k: repr(v) for k, v in self.parts.items()})
        return record


class UnknownBlockError(AsymFusionError, KeyError):
    def __init__(self, name, known):
        self.name = name
        self.known = tuple(known)
        super().__init__(f"unknown fusion block {name!r}; expected one of {', '.join(self.known)}")

    def __str__(self):
        return self.args[0]
