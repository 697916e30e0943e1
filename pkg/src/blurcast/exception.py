def wrap_base_exception(error: BaseException) -> Exception:
    """
    Use when catching a bare ``BaseException`` (e.g. from a worker process).
    Returns the error wrapped in an ``Exception``.

    Re-raises ``GeneratorExit | KeyboardInterrupt | SystemExit`` unchanged.

    Sweep cells run in a process pool and a failing cell must not bring the
    whole sweep down, but interpreter shutdown signals still have to propagate.
    """
    if isinstance(error, Exception):
        return error
    if isinstance(error, GeneratorExit | KeyboardInterrupt | SystemExit):
        raise error
    wrapped_error = Exception(error)
    wrapped_error.with_traceback(error.__traceback__)
    return wrapped_error


class DomainError(Exception): ...


class NumericalError(Exception): ...


class StorageError(Exception): ...


class InvalidConfig(DomainError): ...


class MissingColumn(DomainError):
    def __init__(self, column: str, path: object = None) -> None:
        self.column = column
        self.path = path
        where = f" in `{path}`" if path is not None else ""
        super().__init__(f"Missing column `{column}`{where}")

    def __reduce__(self) -> tuple[type, tuple[object, ...]]:
        return type(self), (self.column, self.path)


class NonNumericCell(DomainError):
    def __init__(self, row: int, column: str) -> None:
        self.row = row
        self.column = column
        super().__init__(f"Non-numeric cell at row {row}, column `{column}`")

    def __reduce__(self) -> tuple[type, tuple[object, ...]]:
        return type(self), (self.row, self.column)


class EmptyFile(DomainError): ...


class IndexGap(DomainError):
    def __init__(self, row: int) -> None:
        self.row = row
        super().__init__(f"Time index is not a unit stride at row {row}")

    def __reduce__(self) -> tuple[type, tuple[object, ...]]:
        return type(self), (self.row,)


class SeriesTooShort(DomainError): ...


class BadFractions(DomainError): ...


class EmptySplit(DomainError): ...


class EmptyResults(DomainError): ...


class PreconditionViolation(DomainError): ...


class ShapeError(DomainError): ...


class DimensionMismatch(ShapeError): ...


class ChannelMismatch(ShapeError): ...


class LengthMismatch(ShapeError): ...


class ShapeMismatch(ShapeError): ...


class StaleCache(ShapeError): ...


class StaleDraw(ShapeError): ...


class NotFactorizable(NumericalError): ...


class NonFiniteValue(NumericalError): ...


class NonFiniteLoss(NumericalError):
    def __init__(self, epoch: int, batch: int, value: float) -> None:
        self.epoch = epoch
        self.batch = batch
        self.value = value
        super().__init__(f"Non-finite loss {value} at epoch {epoch}, batch {batch}")

    def __reduce__(self) -> tuple[type, tuple[object, ...]]:
        return type(self), (self.epoch, self.batch, self.value)


class CheckpointFormatError(StorageError): ...
