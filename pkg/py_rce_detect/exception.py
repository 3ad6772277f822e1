class RceError(Exception):
    pass


class ShapeError(RceError):
    pass


class NumericError(RceError):
    pass


class DivergenceError(NumericError):
    def __init__(self, step: int, loss: float) -> None:
        super().__init__(f"Training diverged at step {step} (loss={loss}).")
        self.step = step
        self.loss = loss


class InvalidLabelError(RceError):
    pass


class DataFormatError(RceError):
    def __init__(self, message: str, offset: int) -> None:
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class DetectorError(RceError):
    def __init__(self, message: str, class_id: int | None = None) -> None:
        super().__init__(message)
        self.class_id = class_id


class InfeasibleGeometryError(RceError):
    pass


class ConfigError(RceError):
    def __init__(self, errors: list[str]) -> None:
        super().__init__("Invalid configuration:\n  " + "\n  ".join(errors))
        self.errors = errors
