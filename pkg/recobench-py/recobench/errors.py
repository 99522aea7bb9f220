from __future__ import annotations


class RecoBenchError(Exception):
    pass


class ConfigError(RecoBenchError, ValueError):
    def __init__(self, field: str, message: str):
        super().__init__(f"invalid config field '{field}': {message}")
        self.field = field


class ProtocolError(RecoBenchError, RuntimeError):
    pass


class InvalidActionError(RecoBenchError, ValueError):
    pass


class InvalidObservationError(RecoBenchError, ValueError):
    pass


class ShapeError(RecoBenchError, ValueError):
    def __init__(self, message: str, layer_index: int | None = None):
        if layer_index is not None:
            message = f"layer {layer_index}: {message}"
        super().__init__(message)
        self.layer_index = layer_index


class StateError(RecoBenchError, RuntimeError):
    pass


class TrainingError(RecoBenchError, RuntimeError):
    def __init__(self, message: str, layer_index: int):
        super().__init__(f"layer {layer_index}: {message}")
        self.layer_index = layer_index


class CalibrationError(RecoBenchError, RuntimeError):
    pass


class RunError(RecoBenchError, RuntimeError):
    def __init__(self, seed: int, message: str):
        super().__init__(f"run with seed {seed} failed: {message}")
        self.seed = seed
        self.message = message

    # raised inside process-pool workers
    def __reduce__(self) -> tuple[type[RunError], tuple[int, str]]:
        return (RunError, (self.seed, self.message))


class ModelFileError(RecoBenchError, ValueError):
    pass
