"""Thermal frame sequences: on-disk format, validation, and the laser flux model.

A sequence is a JSON manifest plus one plain-text grid file per frame.  Frame
files hold one image row per line, space-separated Kelvin values; the manifest
records the pixel pitch, layer spacing, part-detection threshold, frame rate,
and the ordered frame list.  Floats are written with ``repr`` so a save/load
round trip is bit-exact.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .validation import ValidationError, check_positive

DEFAULT_THRESHOLD_K = 423.15

#: Fraction of pixels treated as the laser hot spot, and the gate on the frame
#: maximum (relative to the part threshold) below which no laser is reported.
LASER_PERCENTILE = 0.999
LASER_GATE_FACTOR = 1.5


@dataclass(frozen=True)
class ThermalFrame:
    """One absolute-temperature image, in Kelvin, row-major."""

    width: int
    height: int
    time_s: float
    layer_index: int
    values: np.ndarray  # shape (height, width), float64

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64)
        if vals.size != self.width * self.height:
            raise ValidationError(
                f"frame at t={self.time_s}: {vals.size} values for "
                f"{self.width}x{self.height} grid"
            )
        vals = vals.reshape(self.height, self.width)
        if not np.all(np.isfinite(vals)):
            raise ValidationError(f"frame at t={self.time_s}: non-finite value")
        if not np.all(vals > 0.0):
            raise ValidationError(f"frame at t={self.time_s}: temperature <= 0 K")
        if self.layer_index < 0:
            raise ValidationError(f"frame at t={self.time_s}: negative layer_index")
        object.__setattr__(self, "values", vals)


@dataclass(frozen=True)
class FrameEntry:
    path: str
    time_s: float
    layer_index: int


@dataclass
class SequenceManifest:
    """Acquisition geometry and the ordered frame list of one sequence."""

    pixel_pitch_mm: float
    layer_height_mm: float
    threshold_K: float = DEFAULT_THRESHOLD_K
    frame_rate_hz: float = 3.0
    frames: list[FrameEntry] = field(default_factory=list)

    def __post_init__(self):
        check_positive(self.pixel_pitch_mm, "pixel_pitch_mm")
        check_positive(self.layer_height_mm, "layer_height_mm")
        check_positive(self.threshold_K, "threshold_K")
        check_positive(self.frame_rate_hz, "frame_rate_hz")
        last = None
        for entry in self.frames:
            if last is not None and entry.layer_index < last:
                raise ValidationError(
                    f"manifest: layer_index decreases at frame {entry.path}"
                )
            last = entry.layer_index


@dataclass
class ThermalSequence:
    """Frames sorted by time, with their manifest."""

    manifest: SequenceManifest
    frames: list[ThermalFrame]

    def __post_init__(self):
        for a, b in zip(self.frames, self.frames[1:]):
            if not b.time_s > a.time_s:
                raise ValidationError(
                    f"non-monotone timestamps: t={b.time_s} follows t={a.time_s}"
                )

    def layers(self) -> list[int]:
        return sorted({f.layer_index for f in self.frames})

    def frames_for_layer(self, layer_index: int) -> list[ThermalFrame]:
        return [f for f in self.frames if f.layer_index == layer_index]


@dataclass(frozen=True)
class LaserSource:
    """Point heat source with exponential spatial decay.

    ``intensity_I`` is the flux added at zero distance (Kelvin per step,
    applied additively at top vertices); ``decay_eta`` is the decay rate
    per mm; ``center`` is the in-plane (x, y) position in mm.
    """

    intensity_I: float
    decay_eta: float
    center: tuple[float, float]

    def __post_init__(self):
        if self.intensity_I < 0:
            raise ValidationError("intensity_I must be >= 0")
        if self.decay_eta < 0:
            raise ValidationError("decay_eta must be >= 0")


def laser_flux(source: LaserSource, point) -> float:
    """Flux ``I * exp(-d * eta)`` at a 2D point, d in mm from the center."""
    dx = point[0] - source.center[0]
    dy = point[1] - source.center[1]
    d = math.hypot(dx, dy)
    return source.intensity_I * math.exp(-d * source.decay_eta)


def laser_flux_at(source: LaserSource, points: np.ndarray) -> np.ndarray:
    """Vectorized :func:`laser_flux` over an (n, 2) array of positions."""
    d = np.hypot(points[:, 0] - source.center[0], points[:, 1] - source.center[1])
    return source.intensity_I * np.exp(-d * source.decay_eta)


def detect_laser(frame: ThermalFrame, threshold_K: float,
                 pixel_pitch_mm: float = 1.0):
    """Locate the laser spot in a frame, or return None.

    Returns the unweighted centroid of the pixels whose temperature reaches
    the top 0.1% quantile, provided the frame maximum exceeds
    ``LASER_GATE_FACTOR * threshold_K``.  Position is (x, y) in mm.
    """
    vals = frame.values
    vmax = float(vals.max())
    if not vmax > LASER_GATE_FACTOR * threshold_K:
        return None
    cut = np.quantile(vals, LASER_PERCENTILE)
    rows, cols = np.nonzero(vals >= cut)
    return (float(cols.mean()) * pixel_pitch_mm, float(rows.mean()) * pixel_pitch_mm)


def _format_row(row: np.ndarray) -> str:
    return " ".join(repr(float(v)) for v in row)


def save_frame(frame: ThermalFrame, path: str) -> None:
    with open(path, "w") as fh:
        for row in frame.values:
            fh.write(_format_row(row) + "\n")


def _load_grid(path: str) -> np.ndarray:
    rows = []
    width = None
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            tokens = line.split()
            try:
                row = [float(t) for t in tokens]
            except ValueError as exc:
                raise ValidationError(f"{path}:{lineno}: malformed value ({exc})")
            for t, v in zip(tokens, row):
                if not math.isfinite(v):
                    raise ValidationError(f"{path}:{lineno}: non-finite value '{t}'")
            if width is None:
                width = len(row)
            elif len(row) != width:
                raise ValidationError(
                    f"{path}:{lineno}: row has {len(row)} values, expected {width}"
                )
            rows.append(row)
    if not rows:
        raise ValidationError(f"{path}: empty frame file")
    return np.array(rows, dtype=np.float64)


def load_sequence(manifest_path: str) -> ThermalSequence:
    """Load and validate a sequence from its manifest file."""
    try:
        with open(manifest_path) as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise ValidationError(f"cannot read manifest {manifest_path}: {exc}")
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{manifest_path}: malformed manifest ({exc})")

    try:
        entries = [
            FrameEntry(str(f["path"]), float(f["time_s"]), int(f["layer_index"]))
            for f in raw["frames"]
        ]
        manifest = SequenceManifest(
            pixel_pitch_mm=float(raw["pixel_pitch_mm"]),
            layer_height_mm=float(raw["layer_height_mm"]),
            threshold_K=float(raw.get("threshold_K", DEFAULT_THRESHOLD_K)),
            frame_rate_hz=float(raw.get("frame_rate_hz", 3.0)),
            frames=entries,
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ValidationError(f"{manifest_path}: bad manifest field ({exc})")

    base = os.path.dirname(os.path.abspath(manifest_path))
    frames = []
    last_t = None
    for entry in manifest.frames:
        path = entry.path
        if not os.path.isabs(path):
            path = os.path.join(base, path)
        if not os.path.exists(path):
            raise ValidationError(f"missing frame file: {path}")
        grid = _load_grid(path)
        if last_t is not None and not entry.time_s > last_t:
            raise ValidationError(
                f"{manifest_path}: non-monotone timestamps at {entry.path} "
                f"(t={entry.time_s} after t={last_t})"
            )
        last_t = entry.time_s
        frames.append(ThermalFrame(
            width=grid.shape[1], height=grid.shape[0],
            time_s=entry.time_s, layer_index=entry.layer_index, values=grid,
        ))
    return ThermalSequence(manifest=manifest, frames=frames)


def save_sequence(seq: ThermalSequence, out_dir: str,
                  manifest_name: str = "manifest.json") -> str:
    """Write frames and manifest under ``out_dir``; returns the manifest path."""
    os.makedirs(out_dir, exist_ok=True)
    entries = []
    for i, frame in enumerate(seq.frames):
        name = f"frame_{i:05d}.txt"
        save_frame(frame, os.path.join(out_dir, name))
        entries.append({
            "path": name,
            "time_s": frame.time_s,
            "layer_index": frame.layer_index,
        })
    manifest_path = os.path.join(out_dir, manifest_name)
    doc = {
        "pixel_pitch_mm": seq.manifest.pixel_pitch_mm,
        "layer_height_mm": seq.manifest.layer_height_mm,
        "threshold_K": seq.manifest.threshold_K,
        "frame_rate_hz": seq.manifest.frame_rate_hz,
        "frames": entries,
    }
    with open(manifest_path, "w") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")
    return manifest_path
