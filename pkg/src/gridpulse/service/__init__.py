from .app import create_app
from .runtime import EngineRuntime, LiveSynthetic

__all__ = ["create_app", "EngineRuntime", "LiveSynthetic"]
