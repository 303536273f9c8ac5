"""
Validation utilities for simcache-lab
"""
from services.exceptions import ValidationError

from .config import ConfigValidator

__all__ = ['ConfigValidator', 'ValidationError']
