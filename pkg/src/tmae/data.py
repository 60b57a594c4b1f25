"""Clip ingestion: manifests, window sampling, and synthetic pulsating-disk videos.

Two on-disk formats are owned here:

* Manifest CSV with header ``FileName,EF,Split,FPS[,EDFrame,ESFrame]``
  (UTF-8, comma-separated, ``.`` decimal point). EF is a percentage in
  [0, 100]; Split is one of train/val/test; the optional frame columns
  carry an end-diastole/end-systole annotation pair.
* Raw clip file ``.tnsr``: little-endian header ``magic "TMAE", u32 T,
  u32 H, u32 W`` followed by T*H*W float32 intensities, row-major within
  a frame, frames consecutive.
"""

from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import (
    EmptyManifest,
    InvalidSpec,
    MalformedRow,
    MissingFile,
    NoPhaseInfo,
    TooFewSourceFrames,
    WindowOutOfRange,
)
from .utils import round_half_up

SPLITS = ("train", "val", "test")

TNSR_MAGIC = b"TMAE"
_TNSR_HEADER = struct.Struct("<4sIII")


@dataclass
class ClipRecord:
    """One manifest row: a source video with its EF label and split."""

    source_id: str
    file_path: str
    ef_percent: float
    split: str
    fps: float
    phase_frames: list[tuple[int, int]] = field(default_factory=list)

    def __post_init__(self):
        if not (0.0 <= self.ef_percent <= 100.0):
            raise ValueError(f"ef_percent {self.ef_percent} outside [0, 100]")
        if self.split not in SPLITS:
            raise ValueError(f"split {self.split!r} not one of {SPLITS}")
        if not self.fps > 0:
            raise ValueError(f"fps must be positive, got {self.fps}")
        for ed, es in self.phase_frames:
            if not ed < es:
                raise ValueError(f"ED frame {ed} must precede ES frame {es}")


@dataclass
class VideoClip:
    """T grayscale frames in [0, 1] plus sampling metadata.

    ``t_indices`` records which source-frame indices the frames came from
    and is strictly increasing. ``label`` is the EF percentage when known.
    """

    frames: np.ndarray  # (T, H, W) float32 in [0, 1]
    fps: float
    t_indices: np.ndarray  # (T,) int64
    label: Optional[float] = None

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float32)
        self.t_indices = np.asarray(self.t_indices, dtype=np.int64)
        if self.frames.ndim != 3:
            raise ValueError(f"frames must be (T, H, W), got {self.frames.shape}")
        if len(self.t_indices) != self.frames.shape[0]:
            raise ValueError("t_indices length must equal frame count")
        if len(self.t_indices) > 1 and not np.all(np.diff(self.t_indices) > 0):
            raise ValueError("t_indices must be strictly increasing")
        lo, hi = float(self.frames.min(initial=0.0)), float(self.frames.max(initial=0.0))
        if lo < -1e-6 or hi > 1 + 1e-6:
            raise ValueError(f"pixel values outside [0, 1]: [{lo}, {hi}]")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.frames.shape  # type: ignore[return-value]


@dataclass
class SyntheticSpec:
    """Parameters of a pulsating-disk clip with a known EF analog.

    The disk radius follows
    ``r(t) = r_min + (r_max - r_min) * (1 + sin(2*pi*t/period_s + phase0)) / 2``
    so maximum radius plays the role of end diastole. The area-based EF
    analog is ``1 - (r_min/r_max)**2``.
    """

    r_max: float
    r_min: float
    period_s: float = 1.0
    phase0: float = 0.0
    noise_sigma: float = 0.0
    background: float = 0.1
    fps: float = 50.0
    duration_s: float = 2.5

    def validate(self, H: int, W: int) -> None:
        if not (0 < self.r_min < self.r_max):
            raise InvalidSpec(f"need 0 < r_min < r_max, got {self.r_min}, {self.r_max}")
        if not self.r_max < min(H, W) / 2:
            raise InvalidSpec(f"r_max {self.r_max} must fit inside a {H}x{W} frame")
        if not self.period_s > 0:
            raise InvalidSpec("period_s must be positive")
        if self.noise_sigma < 0:
            raise InvalidSpec("noise_sigma must be >= 0")
        if not (0.0 <= self.background <= 1.0):
            raise InvalidSpec("background intensity must be in [0, 1]")
        if not self.fps > 0:
            raise InvalidSpec("fps must be positive")
        if not self.duration_s > 0:
            raise InvalidSpec("duration_s must be positive")

    @property
    def ef_analog(self) -> float:
        return 1.0 - (self.r_min / self.r_max) ** 2


# --- manifest I/O ---------------------------------------------------------

_HEADER_SHORT = ["FileName", "EF", "Split", "FPS"]
_HEADER_LONG = _HEADER_SHORT + ["EDFrame", "ESFrame"]


def load_manifest(path: Path | str) -> list[ClipRecord]:
    """Parse a manifest CSV into ClipRecords.

    Raises MalformedRow with the 1-based file line number on the first bad
    row; a header-only file raises EmptyManifest.
    """
    path = Path(path)
    if not path.is_file():
        raise MissingFile(f"manifest not found: {path}")
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise EmptyManifest(f"{path} is empty") from None
        header = [h.strip() for h in header]
        if header not in (_HEADER_SHORT, _HEADER_LONG):
            raise MalformedRow(1, f"unrecognized header {header}")
        has_phase = header == _HEADER_LONG
        records = []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            records.append(_parse_row(row, lineno, has_phase))
    if not records:
        raise EmptyManifest(f"{path} has a header but no data rows")
    return records


def _parse_row(row: list[str], lineno: int, has_phase: bool) -> ClipRecord:
    expected = 6 if has_phase else 4
    if len(row) != expected:
        raise MalformedRow(lineno, f"expected {expected} fields, got {len(row)}")
    name = row[0].strip()
    if not name:
        raise MalformedRow(lineno, "empty FileName")
    try:
        ef = float(row[1])
    except ValueError:
        raise MalformedRow(lineno, "ef not numeric") from None
    if not (0.0 <= ef <= 100.0):
        raise MalformedRow(lineno, f"ef {ef} outside [0, 100]")
    split = row[2].strip()
    if split not in SPLITS:
        raise MalformedRow(lineno, f"split {split!r} not one of {SPLITS}")
    try:
        fps = float(row[3])
    except ValueError:
        raise MalformedRow(lineno, "fps not numeric") from None
    if not fps > 0:
        raise MalformedRow(lineno, f"fps {fps} not positive")
    phase: list[tuple[int, int]] = []
    if has_phase and (row[4].strip() or row[5].strip()):
        try:
            ed, es = int(row[4]), int(row[5])
        except ValueError:
            raise MalformedRow(lineno, "EDFrame/ESFrame not integers") from None
        if not ed < es:
            raise MalformedRow(lineno, f"EDFrame {ed} must precede ESFrame {es}")
        phase.append((ed, es))
    return ClipRecord(
        source_id=Path(name).stem,
        file_path=name,
        ef_percent=ef,
        split=split,
        fps=fps,
        phase_frames=phase,
    )


def write_manifest(records: Sequence[ClipRecord], path: Path | str) -> None:
    """Write records as a manifest CSV (inverse of load_manifest)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    has_phase = any(r.phase_frames for r in records)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(_HEADER_LONG if has_phase else _HEADER_SHORT)
        for r in records:
            row = [r.file_path, repr(r.ef_percent), r.split, repr(r.fps)]
            if has_phase:
                if r.phase_frames:
                    ed, es = r.phase_frames[0]
                    row += [str(ed), str(es)]
                else:
                    row += ["", ""]
            writer.writerow(row)


# --- raw clip files ---------------------------------------------------------


def write_tnsr(frames: np.ndarray, path: Path | str) -> None:
    frames = np.asarray(frames, dtype=np.float32)
    if frames.ndim != 3:
        raise ValueError(f"frames must be (T, H, W), got shape {frames.shape}")
    T, H, W = frames.shape
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(_TNSR_HEADER.pack(TNSR_MAGIC, T, H, W))
        f.write(np.ascontiguousarray(frames, dtype="<f4").tobytes())


def read_tnsr(path: Path | str) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise MissingFile(f"clip file not found: {path}")
    raw = path.read_bytes()
    if len(raw) < _TNSR_HEADER.size:
        raise MalformedRow(0, f"{path}: truncated header")
    magic, T, H, W = _TNSR_HEADER.unpack_from(raw)
    if magic != TNSR_MAGIC:
        raise MalformedRow(0, f"{path}: bad magic {magic!r}")
    expected = _TNSR_HEADER.size + 4 * T * H * W
    if len(raw) != expected:
        raise MalformedRow(0, f"{path}: expected {expected} bytes, found {len(raw)}")
    flat = np.frombuffer(raw, dtype="<f4", offset=_TNSR_HEADER.size)
    return flat.reshape(T, H, W).astype(np.float32)


# --- sampling ---------------------------------------------------------------


def window_indices(fps: float, start_frame: int, T: int, window_s: float) -> np.ndarray:
    """Frame indices covering [start, start + window_s] with both endpoints.

    Index k (k = 0..T-1) is ``start + round(k * fps * window_s / (T - 1))``
    with halves rounded up.
    """
    if T < 2:
        raise ValueError(f"T must be >= 2, got {T}")
    if not window_s > 0:
        raise ValueError("window_s must be positive")
    span = fps * window_s
    idx = np.array(
        [start_frame + round_half_up(k * span / (T - 1)) for k in range(T)],
        dtype=np.int64,
    )
    return idx


def resize_area(frame: np.ndarray, H: int, W: int) -> np.ndarray:
    """Box-filter (area-averaging) resample of a single 2-D frame.

    Each output pixel is the exact area-weighted mean of the source pixels
    it covers, so constant images stay constant and integer-factor
    downsampling equals block averaging.
    """
    frame = np.asarray(frame, dtype=np.float64)
    H0, W0 = frame.shape
    if (H0, W0) == (H, W):
        return frame.astype(np.float32)
    out = _area_reduce(_area_reduce(frame, H, axis=0), W, axis=1)
    return (out).astype(np.float32)


def _area_reduce(a: np.ndarray, n_out: int, axis: int) -> np.ndarray:
    n_in = a.shape[axis]
    # weights[i, j] = overlap of output cell i with input cell j, normalized
    # so each row sums to 1
    edges = np.linspace(0.0, n_in, n_out + 1)
    j = np.arange(n_in)
    lo = np.maximum(edges[:-1, None], j[None, :])
    hi = np.minimum(edges[1:, None], j[None, :] + 1)
    weights = np.clip(hi - lo, 0.0, None) * (n_out / n_in)
    return weights @ a if axis == 0 else a @ weights.T


def minmax_normalize(frames: np.ndarray) -> np.ndarray:
    """Per-clip min-max normalization to [0, 1]; constant clips map to zeros."""
    frames = np.asarray(frames, dtype=np.float32)
    lo, hi = float(frames.min()), float(frames.max())
    if hi - lo <= 1e-12:
        return np.zeros_like(frames)
    return (frames - lo) / (hi - lo)


def sample_clip(
    video_frames: np.ndarray,
    fps: float,
    start_frame: int,
    T: int,
    window_s: float,
    H: int = 32,
    W: int = 32,
    label: Optional[float] = None,
) -> VideoClip:
    """Extract T frames spanning a window, resize to HxW, normalize to [0, 1]."""
    video_frames = np.asarray(video_frames)
    if video_frames.ndim != 3:
        raise ValueError(f"video_frames must be (F, H0, W0), got {video_frames.shape}")
    F = video_frames.shape[0]
    idx = window_indices(fps, start_frame, T, window_s)
    if len(np.unique(idx)) != T:
        raise TooFewSourceFrames(
            f"window of {window_s}s at {fps} fps holds fewer than {T} distinct frames"
        )
    if start_frame < 0 or idx[-1] >= F:
        raise WindowOutOfRange(
            f"window needs frames {idx[0]}..{idx[-1]} but source has {F}"
        )
    sampled = np.stack([resize_area(video_frames[i], H, W) for i in idx])
    return VideoClip(
        frames=minmax_normalize(sampled), fps=fps, t_indices=idx, label=label
    )


# --- synthesis ---------------------------------------------------------------


def synthesize_clip(
    spec: SyntheticSpec, H: int, W: int, seed: int
) -> tuple[VideoClip, float]:
    """Render a pulsating disk with Gaussian pixel noise; returns (clip, ef_analog).

    Pure function of (spec, H, W, seed): the same arguments always produce
    bit-identical frames.
    """
    spec.validate(H, W)
    n_frames = max(1, round_half_up(spec.fps * spec.duration_s))
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    cy, cx = (H - 1) / 2.0, (W - 1) / 2.0
    yy, xx = np.mgrid[0:H, 0:W]
    dist = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
    frames = np.empty((n_frames, H, W), dtype=np.float64)
    for k in range(n_frames):
        t = k / spec.fps
        r = spec.r_min + (spec.r_max - spec.r_min) * (
            1.0 + math.sin(2.0 * math.pi * t / spec.period_s + spec.phase0)
        ) / 2.0
        coverage = np.clip(r + 0.5 - dist, 0.0, 1.0)  # 1px antialiased rim
        frames[k] = spec.background + (1.0 - spec.background) * coverage
    if spec.noise_sigma > 0:
        frames += rng.normal(0.0, spec.noise_sigma, size=frames.shape)
    frames = np.clip(frames, 0.0, 1.0).astype(np.float32)
    clip = VideoClip(
        frames=frames,
        fps=spec.fps,
        t_indices=np.arange(n_frames, dtype=np.int64),
        label=100.0 * spec.ef_analog,
    )
    return clip, spec.ef_analog


def oracle_start_frame(source: ClipRecord | SyntheticSpec) -> int:
    """Start frame aligning the sampling window with end diastole.

    For annotated records this is the first ED frame; for synthetic specs it
    is the first radius maximum, at time ``period_s * (1/4 - phase0/2pi + k)``
    for the smallest integer k making that non-negative.
    """
    if isinstance(source, ClipRecord):
        if not source.phase_frames:
            raise NoPhaseInfo(f"record {source.source_id} has no ED/ES annotation")
        return source.phase_frames[0][0]
    if isinstance(source, SyntheticSpec):
        frac = 0.25 - source.phase0 / (2.0 * math.pi)
        k = math.ceil(-frac - 1e-12)
        t_peak = source.period_s * (frac + k)
        return round_half_up(source.fps * t_peak)
    raise NoPhaseInfo(f"no phase information for {type(source).__name__}")


def oracle_phase_pair(spec: SyntheticSpec) -> tuple[int, int]:
    """(ED, ES) frame indices for a synthetic clip: first maximum, next minimum."""
    ed = oracle_start_frame(spec)
    frac = 0.25 - spec.phase0 / (2.0 * math.pi)
    k = math.ceil(-frac - 1e-12)
    t_es = spec.period_s * (frac + k) + spec.period_s / 2.0
    es = round_half_up(spec.fps * t_es)
    if es <= ed:  # rounding can collapse very short periods
        es = ed + 1
    return ed, es
