"""Exception hierarchy for the FreeFix engine.

Every error carries structured context and serializes to the JSON body the
CLI prints on failure.
"""

from typing import Any, Dict, List, Optional


class FreeFixError(Exception):
    """Base class for all engine errors."""

    exit_code = 1

    def __init__(self, message: str, **context: Any):
        super().__init__(message)
        self.message = message
        self.context = context

    def to_dict(self) -> Dict[str, Any]:
        body = {"error": type(self).__name__, "message": self.message}
        for key, value in self.context.items():
            body[key] = value if isinstance(value, (str, int, float, bool, type(None), list, dict)) else str(value)
        return body


class ConfigError(FreeFixError):
    """Invalid run configuration (unknown keys, out-of-range values)."""

    exit_code = 2

    def __init__(self, message: str, locations: Optional[List[str]] = None):
        super().__init__(message, locations=locations or [])


class SceneFormatError(FreeFixError):
    """A scene, camera or PLY file could not be parsed."""

    def __init__(self, message: str, path: str = "", line: Optional[int] = None, field: Optional[str] = None):
        super().__init__(message, path=path, line=line, field=field)


class InvariantError(FreeFixError):
    """A primitive or camera violates a data-model invariant."""

    def __init__(self, message: str, index: Optional[int] = None, field: Optional[str] = None):
        super().__init__(message, index=index, field=field)


class PlacementError(FreeFixError):
    """Floater placement gave up after its retry budget."""

    def __init__(self, message: str, placed: int, requested: int):
        super().__init__(message, placed=placed, requested=requested)


class ShapeMismatchError(FreeFixError):
    """Two images or an image and a per-Gaussian vector disagree in shape."""


class DenoiserError(FreeFixError):
    """The denoiser failed or returned an invalid velocity."""

    def __init__(self, message: str, step: Optional[int] = None, sigma: Optional[float] = None):
        super().__init__(message, step=step, sigma=sigma)


class BridgeTimeoutError(DenoiserError):
    """No response file appeared in the exchange directory in time."""


class RefinementError(FreeFixError):
    """A refinement step produced a non-finite loss; the scene was not updated."""


class PipelineError(FreeFixError):
    """A pipeline stage failed; partial records and the last good scene are attached."""

    def __init__(self, message: str, stage: int, records: Optional[list] = None, scene_path: Optional[str] = None):
        super().__init__(message, stage=stage, scene_path=scene_path)
        self.records = records or []
