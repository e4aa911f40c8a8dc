"""Binary I/O for frame-level feature matrices and a synthetic feature source.

A FEAT file is a 20-byte little-endian header followed by float32 rows::

    magic "FEAT" | version u32 | n_frames u32 | dim u32 | frame_period_us u32

The synthetic generator draws each frame around an anchor vector, which lets
the rest of the pipeline run without any self-supervised speech model.
"""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from dualqa.validation import as_unit_ids, check_frames

FEAT_MAGIC = b"FEAT"
FEAT_VERSION = 1
_HEADER = struct.Struct("<4sIIII")
DEFAULT_FRAME_PERIOD_US = 20_000


class FeatureFormatError(ValueError):
    """Base class for malformed FEAT files."""


class BadMagicError(FeatureFormatError):
    pass


class VersionMismatchError(FeatureFormatError):
    pass


class TruncatedPayloadError(FeatureFormatError):
    pass


class NonFinitePayloadError(FeatureFormatError):
    pass


@dataclass(eq=False)
class FeatureMatrix:
    """Frames x dims float32 features with an integer frame period in microseconds."""

    data: np.ndarray
    frame_period_us: int = DEFAULT_FRAME_PERIOD_US

    def __post_init__(self):
        self.data = check_frames(self.data, dtype=np.float32)
        if int(self.frame_period_us) <= 0:
            raise ValueError(f"frame_period_us must be positive, got {self.frame_period_us}")
        self.frame_period_us = int(self.frame_period_us)

    @property
    def n_frames(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]

    @property
    def frame_period(self) -> float:
        return self.frame_period_us / 1e6

    def __eq__(self, other):
        if not isinstance(other, FeatureMatrix):
            return NotImplemented
        return (
            self.frame_period_us == other.frame_period_us
            and self.data.shape == other.data.shape
            and self.data.tobytes() == other.data.tobytes()
        )


def write_features(m: FeatureMatrix, path: str | os.PathLike) -> None:
    if not np.isfinite(m.data).all():
        raise ValueError("refusing to write non-finite feature values")
    header = _HEADER.pack(FEAT_MAGIC, FEAT_VERSION, m.n_frames, m.dim, m.frame_period_us)
    payload = np.ascontiguousarray(m.data, dtype="<f4").tobytes()
    Path(path).write_bytes(header + payload)


def read_features(path: str | os.PathLike) -> FeatureMatrix:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise TruncatedPayloadError(f"{path}: file shorter than the {_HEADER.size}-byte header")
    magic, version, n_frames, dim, period_us = _HEADER.unpack_from(raw)
    if magic != FEAT_MAGIC:
        raise BadMagicError(f"{path}: bad magic {magic!r}, expected {FEAT_MAGIC!r}")
    if version != FEAT_VERSION:
        raise VersionMismatchError(f"{path}: version {version}, expected {FEAT_VERSION}")
    expected = n_frames * dim * 4
    body = raw[_HEADER.size:]
    if len(body) != expected:
        raise TruncatedPayloadError(
            f"{path}: header declares {n_frames}x{dim} frames ({expected} bytes), payload has {len(body)}"
        )
    data = np.frombuffer(body, dtype="<f4").reshape(n_frames, dim).astype(np.float32)
    if not np.isfinite(data).all():
        raise NonFinitePayloadError(f"{path}: payload contains NaN or infinite values")
    return FeatureMatrix(data, period_us)


def synth_features(
    frame_units: Sequence[int],
    anchors: np.ndarray,
    noise_sigma: float,
    seed: int,
    frame_period_us: int = DEFAULT_FRAME_PERIOD_US,
) -> FeatureMatrix:
    """Frame t is ``anchors[frame_units[t]]`` plus isotropic Gaussian noise."""
    anchors = check_frames(anchors, dtype=np.float64)
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be >= 0")
    units = as_unit_ids(frame_units, n_units=anchors.shape[0])
    rng = np.random.default_rng(seed)
    data = anchors[units]
    if noise_sigma > 0:
        data = data + rng.normal(0.0, noise_sigma, size=data.shape)
    return FeatureMatrix(data.astype(np.float32), frame_period_us)
