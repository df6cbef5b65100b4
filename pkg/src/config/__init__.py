# Config module
from .settings import RunConfig, Settings

__all__ = ['RunConfig', 'Settings']
