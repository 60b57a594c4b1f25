"""Dataset-level plumbing: clip stores over manifests and synthetic dataset
generation with analytically known labels and phase annotations."""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .config import Config
from .data import (
    ClipRecord,
    SyntheticSpec,
    VideoClip,
    oracle_phase_pair,
    oracle_start_frame,
    read_tnsr,
    sample_clip,
    synthesize_clip,
    window_indices,
    write_manifest,
    write_tnsr,
)
from .errors import EmptyManifest, WindowOutOfRange
from .utils import derive_seed


class ClipStore:
    """Records plus lazily cached source frames, addressed by manifest order.

    Global record indices are stable across splits so per-clip seed streams
    stay aligned no matter which split a consumer iterates.
    """

    def __init__(self, records: Sequence[ClipRecord], root: Path):
        self.records = list(records)
        self.root = Path(root)
        self._frames: dict[int, np.ndarray] = {}
        self._window_cache: dict[tuple[int, int], np.ndarray] = {}

    @classmethod
    def from_manifest(cls, manifest_path: Path | str, clips_root: str = "") -> "ClipStore":
        from .data import load_manifest

        manifest_path = Path(manifest_path)
        records = load_manifest(manifest_path)
        root = Path(clips_root) if clips_root else manifest_path.parent
        return cls(records, root)

    def split(self, name: str) -> list[int]:
        return [i for i, r in enumerate(self.records) if r.split == name]

    def frames(self, idx: int) -> np.ndarray:
        if idx not in self._frames:
            record = self.records[idx]
            path = Path(record.file_path)
            if not path.is_absolute():
                path = self.root / path
            self._frames[idx] = read_tnsr(path)
        return self._frames[idx]

    def max_start(self, idx: int, T: int, window_s: float) -> int:
        record = self.records[idx]
        frames = self.frames(idx)
        span = window_indices(record.fps, 0, T, window_s)[-1]
        return frames.shape[0] - 1 - int(span)

    def start_frame(
        self,
        idx: int,
        oracle: bool,
        T: int,
        window_s: float,
        sample_seed: int = 0,
        epoch: int = 0,
        randomize: bool = False,
    ) -> int:
        """Window start: ED-aligned when oracle, else random (training) or 0."""
        if oracle:
            return oracle_start_frame(self.records[idx])
        if not randomize:
            return 0
        hi = self.max_start(idx, T, window_s)
        if hi <= 0:
            return 0
        rng = np.random.Generator(
            np.random.PCG64(np.random.SeedSequence((sample_seed, epoch, idx)))
        )
        return int(rng.integers(0, hi + 1))

    def sample(
        self, idx: int, start: int, T: int, window_s: float, H: int, W: int,
        cache: bool = False,
    ) -> VideoClip:
        record = self.records[idx]
        key = (idx, start)
        if cache and key in self._window_cache:
            frames = self._window_cache[key]
            return VideoClip(
                frames=frames,
                fps=record.fps,
                t_indices=window_indices(record.fps, start, T, window_s),
                label=record.ef_percent,
            )
        clip = sample_clip(
            self.frames(idx), record.fps, start, T, window_s, H=H, W=W,
            label=record.ef_percent,
        )
        if cache:
            self._window_cache[key] = clip.frames
        return clip

    def __len__(self) -> int:
        return len(self.records)


def _split_assignment(n: int, train_frac: float, val_frac: float) -> list[str]:
    """Deterministic split labels for n items of one class."""
    n_train = int(round(train_frac * n))
    n_val = int(round(val_frac * n))
    n_train = min(n_train, n)
    n_val = min(n_val, n - n_train)
    return ["train"] * n_train + ["val"] * n_val + ["test"] * (n - n_train - n_val)


def generate_dataset(
    out_dir: Path | str,
    n_clips: int,
    cfg: Config,
    seed: int,
    workers: int = 1,
) -> Path:
    """Synthesize a class-balanced pulsating-disk dataset with a manifest.

    Writes ``clips/clip_NNNN.tnsr`` files plus ``manifest.csv`` (with ED/ES
    phase columns) under out_dir and returns the manifest path. Byte-identical
    for identical (cfg, seed) regardless of worker count.
    """
    if n_clips < 1:
        raise EmptyManifest("n_clips must be >= 1")
    out_dir = Path(out_dir)
    (out_dir / "clips").mkdir(parents=True, exist_ok=True)
    d = cfg.values["data"]
    H, W = d["height"], d["width"]
    margin = d["synth_ef_margin"]
    if not (0.0 < d["synth_ef_lo"] < 0.5 - margin and 0.5 + margin < d["synth_ef_hi"] < 1.0):
        raise EmptyManifest("synthetic EF ranges must bracket the 0.5 boundary")

    rng = np.random.Generator(
        np.random.PCG64(np.random.SeedSequence(derive_seed(seed, "data", "specs")))
    )
    n_pos = int(round(d["synth_balance"] * n_clips))
    splits_pos = _split_assignment(n_pos, d["split_train"], d["split_val"])
    splits_neg = _split_assignment(n_clips - n_pos, d["split_train"], d["split_val"])

    specs: list[SyntheticSpec] = []
    records: list[ClipRecord] = []
    for i in range(n_clips):
        reduced = i < n_pos
        r_max = rng.uniform(d["synth_r_max_lo"], d["synth_r_max_hi"])
        if reduced:
            ef = rng.uniform(d["synth_ef_lo"], 0.5 - margin)
        else:
            ef = rng.uniform(0.5 + margin, d["synth_ef_hi"])
        phase0 = rng.uniform(0.0, 2.0 * math.pi)
        spec = SyntheticSpec(
            r_max=r_max,
            r_min=r_max * math.sqrt(1.0 - ef),
            period_s=d["synth_period_s"],
            phase0=phase0,
            noise_sigma=d["synth_noise_sigma"],
            background=d["synth_background"],
            fps=d["synth_fps"],
            duration_s=d["synth_duration_s"],
        )
        spec.validate(H, W)
        split = splits_pos[i] if reduced else splits_neg[i - n_pos]
        specs.append(spec)
        records.append(
            ClipRecord(
                source_id=f"clip_{i:04d}",
                file_path=f"clips/clip_{i:04d}.tnsr",
                ef_percent=100.0 * spec.ef_analog,
                split=split,
                fps=spec.fps,
                phase_frames=[oracle_phase_pair(spec)],
            )
        )

    def render(i: int) -> None:
        clip, _ = synthesize_clip(specs[i], H, W, derive_seed(seed, "data", i))
        write_tnsr(clip.frames, out_dir / records[i].file_path)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(render, range(n_clips)))
    else:
        for i in range(n_clips):
            render(i)

    manifest_path = out_dir / "manifest.csv"
    write_manifest(records, manifest_path)
    return manifest_path
