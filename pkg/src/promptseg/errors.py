"""Exception types shared across the package."""


class PromptSegError(Exception):
    """Base class for package errors."""


class ShapeError(PromptSegError, ValueError):
    """Operand shapes or dimensions do not satisfy an op's contract."""


class InputError(PromptSegError, ValueError):
    """Caller-supplied data is invalid (out of bounds, empty, wrong label)."""


class NumericsError(PromptSegError, ArithmeticError):
    """A forward op produced NaN/Inf, or an objective is non-finite."""


class DegenerateAttentionError(PromptSegError, ValueError):
    """Attention was asked to normalize over an empty or fully-masked row."""


class RleFormatError(PromptSegError, ValueError):
    """Run-length string is malformed or inconsistent with its header."""


class SceneSpecError(PromptSegError, ValueError):
    """A synthetic scene specification violates its invariants."""


class ConfigError(PromptSegError, ValueError):
    """Run configuration is missing fields or references missing paths."""


class StateError(PromptSegError, RuntimeError):
    """Streaming state was driven into an unreachable configuration."""


class TrainingDivergedError(PromptSegError, RuntimeError):
    """Training hit a non-finite loss; carries the offending step."""

    def __init__(self, step: int, message: str):
        super().__init__(f"step {step}: {message}")
        self.step = step
