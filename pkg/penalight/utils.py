"""Shared utilities for the entire toolkit"""

__all__ = ['logger', 'setup_logger', 'PenalightError', 'load_json_safely', 'save_json_safely', 'env_seed',
           'as_vector']

from typing import Dict, Optional, Any
import json
import os
from pathlib import Path
import logging

import numpy as np
from dotenv import load_dotenv


def setup_logger(name: str) -> logging.Logger:
    """Set up module logger with consistent formatting"""
    logger = logging.getLogger(name)
    if not logger.handlers:
        handler = logging.StreamHandler()
        handler.setFormatter(
            logging.Formatter('%(asctime)s - %(name)s - %(levelname)s - %(message)s')
        )
        logger.addHandler(handler)
        logger.setLevel(logging.INFO)
    return logger

logger = setup_logger(__name__)


class PenalightError(Exception):
    """Base class for toolkit errors"""
    pass


def load_json_safely(path: Path) -> Dict:
    """
    Safely load a JSON document (run configs, saved reports).

    Args:
        path: Path to JSON file

    Returns:
        dict: Parsed document

    Raises:
        ValueError: If file is invalid or inaccessible
    """
    try:
        with open(path, 'r') as f:
            return json.load(f)
    except json.JSONDecodeError as e:
        raise ValueError(f"Invalid JSON file format: {str(e)}")
    except Exception as e:
        raise ValueError(f"Error loading JSON file: {str(e)}")


def save_json_safely(data: Any, path: Path) -> None:
    """
    Safely save JSON data, either a dict or a pre-serialized string.

    Raises:
        ValueError: If save operation fails
    """
    try:
        with open(path, 'w') as f:
            if isinstance(data, str):
                f.write(data)
            else:
                json.dump(data, f, indent=2)
    except Exception as e:
        raise ValueError(f"Error saving JSON file: {str(e)}")


def env_seed(default: int = 0) -> int:
    """Seed for randomized restart jitter; `PENALIGHT_SEED` overrides `default`."""
    load_dotenv()
    raw = os.getenv("PENALIGHT_SEED")
    if raw is None or raw.strip() == "":
        return default
    try:
        return int(raw)
    except ValueError:
        logger.warning(f"Ignoring non-integer PENALIGHT_SEED={raw!r}")
        return default


def as_vector(value: Any, size: Optional[int] = None) -> np.ndarray:
    """Coerce scalars and sequences to a 1-D float array, optionally checking its length."""
    arr = np.atleast_1d(np.asarray(value, dtype=float)).ravel()
    if size is not None and arr.shape[0] != size:
        raise ValueError(f"expected a vector of length {size}, got shape {arr.shape}")
    return arr
