"""Fetal ultrasound vision-language toolkit."""

from .config import config
from .constants import *
from .models import *

__all__ = ["config"]
