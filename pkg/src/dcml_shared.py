#!/usr/bin/env python3
"""
DCML SHARED UTILITIES v1.0.0
============================
Common utilities for every DCML module to reduce boilerplate and ensure consistency.
Provides: data paths, logging, the error hierarchy, numeric flags, atomic file
writes, line-JSON run logs and output formatting.
"""

import os
import sys
import json
import logging
import tempfile
import threading
from pathlib import Path
from datetime import datetime, timezone
from typing import Optional, Dict, Any, List

# ============= VERSION & CONFIGURATION =============
VERSION = "1.0.0"
TOOL_NAME = "dcml"

# ============= CROSS-PLATFORM DATA DIRECTORY =============
def get_base_data_dir() -> Path:
    """Get cross-platform base directory for runs, datasets and checkpoints"""
    if sys.platform == "win32":
        base = Path.home() / "AppData" / "Roaming" / "dcml"
    elif sys.platform == "darwin":
        base = Path.home() / "Library" / "Application Support" / "dcml"
    else:
        base = Path.home() / ".dcml"

    # Allow override via environment
    if 'DCML_DATA_DIR' in os.environ:
        base = Path(os.environ['DCML_DATA_DIR'])

    base.mkdir(parents=True, exist_ok=True)
    return base

def get_run_dir(run_name: str, root: Optional[Path] = None) -> Path:
    """Get (and create) the directory for one named run"""
    run_dir = Path(root) if root else get_base_data_dir() / "runs" / run_name
    run_dir.mkdir(parents=True, exist_ok=True)
    return run_dir

# ============= LOGGING SETUP =============
def setup_logging(tool_name: str = TOOL_NAME, level: Optional[int] = None) -> logging.Logger:
    """Configure logging to stderr only

    Default level is WARNING to reduce noise in normal operation.
    DCML_LOG_LEVEL (e.g. INFO, DEBUG) or an explicit level raises it.
    """
    if level is None:
        env_level = os.environ.get('DCML_LOG_LEVEL', 'WARNING').upper()
        level = getattr(logging, env_level, logging.WARNING)
    logging.basicConfig(
        level=level,
        format=f'%(asctime)s - [{tool_name}] - %(message)s',
        stream=sys.stderr
    )
    logging.getLogger().setLevel(level)
    return logging.getLogger(tool_name)

logger = logging.getLogger(__name__)

# ============= ERROR HIERARCHY =============
class DCMLError(Exception):
    """Base error; carries a machine-readable code and details for the CLI"""

    code = "dcml_error"

    def __init__(self, message: str, **details: Any):
        super().__init__(message)
        self.message = message
        self.details = details

    def to_dict(self) -> Dict[str, Any]:
        return {
            "error": {
                "code": self.code,
                "message": self.message,
                "details": {k: _jsonable(v) for k, v in self.details.items()},
            }
        }

class DimensionError(DCMLError):
    code = "dimension_error"

class NonFiniteError(DCMLError):
    code = "non_finite"

class GeometryError(DCMLError):
    code = "geometry_error"

class ConfigError(DCMLError):
    code = "config_error"

class WarmupError(DCMLError):
    code = "warmup_error"

class DependencyError(DCMLError):
    code = "missing_dependency"

class FormatError(DCMLError):
    code = "format_error"

class LabelError(DCMLError):
    code = "label_error"

class DegenerateError(DCMLError):
    code = "degenerate_training"

def _jsonable(value: Any) -> Any:
    """Coerce tuples, paths and numpy scalars into JSON-safe values"""
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, Path):
        return str(value)
    if hasattr(value, 'item') and callable(value.item):
        try:
            return value.item()
        except (ValueError, TypeError):
            return str(value)
    if isinstance(value, (str, int, float, bool)) or value is None:
        return value
    return str(value)

# ============= NUMERIC FLAGS =============
class NumericFlags:
    """Process-wide counter of recoverable numerical degeneracies.

    Things like a zero vector handed to l2_normalize are not errors, but a
    report or test needs to know they happened.
    """

    def __init__(self):
        self._lock = threading.Lock()
        self._counts: Dict[str, int] = {}

    def raise_flag(self, name: str, message: str = ""):
        with self._lock:
            self._counts[name] = self._counts.get(name, 0) + 1
            first = self._counts[name] == 1
        if first:
            logger.warning(f"[FLAG] {name}: {message}")
        else:
            logger.debug(f"[FLAG] {name}: {message}")

    def count(self, name: str) -> int:
        with self._lock:
            return self._counts.get(name, 0)

    def snapshot(self) -> Dict[str, int]:
        with self._lock:
            return dict(self._counts)

    def reset(self):
        with self._lock:
            self._counts.clear()

FLAGS = NumericFlags()

# ============= ATOMIC FILE WRITES =============
def atomic_write_bytes(path: Path, payload: bytes):
    """Write bytes via temp-file-then-rename so readers never see partial files"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(prefix=f".{path.name}.", dir=str(path.parent))
    try:
        with os.fdopen(fd, 'wb') as f:
            f.write(payload)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp_name, path)
    except BaseException:
        try:
            os.unlink(tmp_name)
        except OSError:
            pass
        raise

def atomic_write_text(path: Path, text: str):
    atomic_write_bytes(path, text.encode('utf-8'))

def atomic_write_json(path: Path, data: Any):
    atomic_write_text(path, json.dumps(data, indent=2, sort_keys=True))

# ============= RUN LOG =============
class RunLog:
    """Append-only line-delimited JSON log for one training stage"""

    def __init__(self, path: Optional[Path]):
        self.path = Path(path) if path else None
        self.records: List[Dict[str, Any]] = []
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)

    def write(self, **record: Any) -> Dict[str, Any]:
        entry = {k: _jsonable(v) for k, v in record.items()}
        entry['time'] = datetime.now(timezone.utc).isoformat()
        self.records.append(entry)
        if self.path:
            with open(self.path, 'a', encoding='utf-8') as f:
                f.write(json.dumps(entry) + "\n")
        return entry

    def last(self, **match: Any) -> Optional[Dict[str, Any]]:
        """Most recent record whose fields equal every given value"""
        for entry in reversed(self.records):
            if all(entry.get(k) == v for k, v in match.items()):
                return entry
        return None

def read_run_log(path: Path) -> List[Dict[str, Any]]:
    try:
        with open(path, 'r', encoding='utf-8') as f:
            return [json.loads(line) for line in f if line.strip()]
    except FileNotFoundError:
        return []

# ============= OUTPUT FORMATTING =============
def pipe_escape(text: str) -> str:
    """Escape pipes in text for pipe format"""
    return str(text).replace('|', '\\|')

def format_output(data: Dict[str, Any], format_type: str = 'pipe') -> str:
    """Format output data according to specified format"""
    if format_type == 'json':
        return json.dumps({k: _jsonable(v) for k, v in data.items()}, indent=2)
    elif format_type == 'pipe':
        # Simple pipe format for single values
        if len(data) == 1:
            return pipe_escape(str(list(data.values())[0]))
        parts = [f"{k}:{pipe_escape(str(v))}" for k, v in data.items()]
        return '|'.join(parts)
    else:
        return ' | '.join(f"{k}: {v}" for k, v in data.items())
