"""Utility Functions

Common utility functions used across the application: JSON and binary
container persistence, graymap images, grid hashing and progress tracking.
"""

import os
import json
import struct
import hashlib
import logging
from typing import Dict, List, Optional, Any, Tuple

import numpy as np
from PIL import Image

from .errors import BasisFormatError

# Set up logging
logger = logging.getLogger(__name__)

HEADER_LENGTH_FORMAT = '<Q'


def ensure_directory(directory: str) -> None:
    """Ensure directory exists, create if it doesn't.

    Args:
        directory: Directory path to ensure
    """
    if not directory:
        return
    try:
        os.makedirs(directory, exist_ok=True)
    except Exception as e:
        logger.error(f"Could not create directory {directory}: {e}")
        raise


def save_json(data: Dict, filepath: str, indent: int = 2) -> None:
    """Save data to JSON file.

    Keys are sorted so that identical data always produces identical bytes.

    Args:
        data: Data to save
        filepath: Path to save file
        indent: JSON indentation
    """
    try:
        ensure_directory(os.path.dirname(filepath))
        with open(filepath, 'w', encoding='utf-8') as f:
            json.dump(data, f, indent=indent, ensure_ascii=False, sort_keys=True)
            f.write('\n')
    except Exception as e:
        logger.error(f"Could not save JSON to {filepath}: {e}")
        raise


def load_json(filepath: str) -> Optional[Dict]:
    """Load data from JSON file.

    Args:
        filepath: Path to JSON file

    Returns:
        Loaded data or None if error
    """
    try:
        with open(filepath, 'r', encoding='utf-8') as f:
            return json.load(f)
    except Exception as e:
        logger.error(f"Could not load JSON from {filepath}: {e}")
        return None


def canonical_hash(payload: Dict) -> str:
    """SHA-256 of the canonical (sorted, compact) JSON encoding of a dict."""
    encoded = json.dumps(payload, sort_keys=True, separators=(',', ':')).encode('utf-8')
    return hashlib.sha256(encoded).hexdigest()


def write_container(filepath: str, magic: bytes, header: Dict,
                    payload: List[np.ndarray]) -> None:
    """Write a binary container: magic, header length, JSON header, arrays.

    Args:
        filepath: Destination path
        magic: 8-byte file signature
        header: JSON-serializable header
        payload: Arrays written in order as raw little-endian bytes
            (column-major for 2D arrays)
    """
    if len(magic) != 8:
        raise ValueError("container magic must be 8 bytes")
    header_bytes = json.dumps(header, sort_keys=True).encode('utf-8')
    ensure_directory(os.path.dirname(filepath))
    with open(filepath, 'wb') as f:
        f.write(magic)
        f.write(struct.pack(HEADER_LENGTH_FORMAT, len(header_bytes)))
        f.write(header_bytes)
        for array in payload:
            f.write(array.tobytes(order='F'))
    logger.debug(f"Wrote container {filepath} ({len(payload)} arrays)")


def read_container(filepath: str, magic: bytes) -> Tuple[Dict, bytes]:
    """Read a binary container written by write_container.

    Args:
        filepath: Source path
        magic: Expected 8-byte file signature

    Returns:
        Tuple of (header dict, raw payload bytes)

    Raises:
        BasisFormatError: Wrong signature or truncated header
    """
    with open(filepath, 'rb') as f:
        blob = f.read()

    if len(blob) < 16 or blob[:8] != magic:
        raise BasisFormatError(f"{filepath}: not a {magic.decode('ascii', 'replace')} container")

    (header_length,) = struct.unpack(HEADER_LENGTH_FORMAT, blob[8:16])
    header_end = 16 + header_length
    if header_end > len(blob):
        raise BasisFormatError(f"{filepath}: truncated header")

    try:
        header = json.loads(blob[16:header_end].decode('utf-8'))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise BasisFormatError(f"{filepath}: corrupt header ({e})")

    return header, blob[header_end:]


def payload_array(payload: bytes, offset: int, shape: Tuple[int, ...],
                  dtype: str) -> Tuple[np.ndarray, int]:
    """Slice one column-major array out of a container payload.

    Returns:
        Tuple of (array, next offset)
    """
    dt = np.dtype(dtype)
    count = int(np.prod(shape))
    end = offset + count * dt.itemsize
    if end > len(payload):
        raise BasisFormatError("container payload is truncated")
    array = np.frombuffer(payload[offset:end], dtype=dt).reshape(shape, order='F')
    return array.astype(dt.newbyteorder('='), copy=True), end


def save_graymap(image: np.ndarray, filepath: str) -> None:
    """Save a uint8 image as a binary portable graymap (P5).

    Args:
        image: 2D array, row 0 is the top of the picture
        filepath: Destination path
    """
    ensure_directory(os.path.dirname(filepath))
    Image.fromarray(np.ascontiguousarray(image, dtype=np.uint8), 'L').save(filepath, format='PPM')


def load_graymap(filepath: str) -> np.ndarray:
    """Load a portable graymap (P2 or P5) as a uint8 array."""
    with Image.open(filepath) as img:
        return np.array(img.convert('L'), dtype=np.uint8)


def save_grid_csv(values: np.ndarray, filepath: str) -> None:
    """Save a 2D numeric grid as comma-separated text."""
    ensure_directory(os.path.dirname(filepath))
    np.savetxt(filepath, values, delimiter=',', fmt='%.10e')


def to_graylevels(values: np.ndarray, low: float, high: float) -> np.ndarray:
    """Map values linearly from [low, high] onto 0..255.

    Args:
        values: Array of values
        low: Value mapped to 0
        high: Value mapped to 255

    Returns:
        uint8 array of the same shape
    """
    if high == low:
        return np.zeros(values.shape, dtype=np.uint8)
    scaled = (np.asarray(values, dtype=float) - low) / (high - low)
    return np.clip(np.rint(255.0 * scaled), 0, 255).astype(np.uint8)


class ProgressTracker:
    """Simple progress tracking utility."""

    def __init__(self, total: int, description: str = "Processing"):
        """Initialize progress tracker.

        Args:
            total: Total number of items to process
            description: Description of the process
        """
        self.total = total
        self.current = 0
        self.description = description

    def update(self, increment: int = 1) -> None:
        """Update progress.

        Args:
            increment: Number of items completed
        """
        self.current = min(self.current + increment, self.total)
        percentage = (self.current / self.total) * 100 if self.total > 0 else 0

        logger.info(f"{self.description}: {self.current}/{self.total} ({percentage:.1f}%)")

    def is_complete(self) -> bool:
        """Check if processing is complete.

        Returns:
            True if complete, False otherwise
        """
        return self.current >= self.total
