import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tmae.data import (
    ClipRecord,
    SyntheticSpec,
    load_manifest,
    minmax_normalize,
    oracle_phase_pair,
    oracle_start_frame,
    read_tnsr,
    resize_area,
    sample_clip,
    synthesize_clip,
    window_indices,
    write_manifest,
    write_tnsr,
)
from tmae.errors import (
    EmptyManifest,
    InvalidSpec,
    MalformedRow,
    MissingFile,
    NoPhaseInfo,
    TooFewSourceFrames,
    WindowOutOfRange,
)


def write_lines(path, lines):
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


class TestManifest:
    def test_basic_row(self, tmp_path):
        p = tmp_path / "m.csv"
        write_lines(p, ["FileName,EF,Split,FPS", "clipA,62.1,train,50"])
        records = load_manifest(p)
        assert len(records) == 1
        r = records[0]
        assert r.ef_percent == 62.1
        assert r.split == "train"
        assert r.fps == 50
        assert r.phase_frames == []

    def test_header_only_is_empty(self, tmp_path):
        p = tmp_path / "m.csv"
        write_lines(p, ["FileName,EF,Split,FPS"])
        with pytest.raises(EmptyManifest):
            load_manifest(p)

    def test_non_numeric_ef_names_row(self, tmp_path):
        p = tmp_path / "m.csv"
        write_lines(p, ["FileName,EF,Split,FPS", "clipB,abc,train,50"])
        with pytest.raises(MalformedRow) as exc:
            load_manifest(p)
        assert exc.value.row == 2
        assert "ef not numeric" in exc.value.reason

    def test_bad_split_rejected(self, tmp_path):
        p = tmp_path / "m.csv"
        write_lines(p, ["FileName,EF,Split,FPS", "a,50,train,50", "b,50,dev,50"])
        with pytest.raises(MalformedRow) as exc:
            load_manifest(p)
        assert exc.value.row == 3

    def test_missing_file(self, tmp_path):
        with pytest.raises(MissingFile):
            load_manifest(tmp_path / "nope.csv")

    def test_phase_columns(self, tmp_path):
        p = tmp_path / "m.csv"
        write_lines(
            p,
            ["FileName,EF,Split,FPS,EDFrame,ESFrame", "a,40,test,30,17,42"],
        )
        [r] = load_manifest(p)
        assert r.phase_frames == [(17, 42)]

    def test_ed_must_precede_es(self, tmp_path):
        p = tmp_path / "m.csv"
        write_lines(
            p, ["FileName,EF,Split,FPS,EDFrame,ESFrame", "a,40,test,30,42,17"]
        )
        with pytest.raises(MalformedRow):
            load_manifest(p)

    def test_roundtrip_identity(self, tmp_path):
        records = [
            ClipRecord("a", "clips/a.tnsr", 62.1, "train", 50.0, [(3, 20)]),
            ClipRecord("b", "clips/b.tnsr", 38.25, "val", 30.0, []),
            ClipRecord("c", "c.tnsr", 50.0, "test", 25.5, [(0, 7)]),
        ]
        p = tmp_path / "m.csv"
        write_manifest(records, p)
        assert load_manifest(p) == records

    @given(
        efs=st.lists(
            st.floats(min_value=0, max_value=100, allow_nan=False), min_size=1, max_size=8
        )
    )
    @settings(max_examples=30, deadline=None)
    def test_roundtrip_random_efs(self, tmp_path_factory, efs):
        records = [
            ClipRecord(f"r{i}", f"r{i}.tnsr", ef, "train", 50.0) for i, ef in enumerate(efs)
        ]
        p = tmp_path_factory.mktemp("manifests") / "m.csv"
        write_manifest(records, p)
        assert load_manifest(p) == records


class TestTnsr:
    def test_roundtrip(self, tmp_path, rng):
        frames = rng.random((5, 8, 6), dtype=np.float32)
        p = tmp_path / "clip.tnsr"
        write_tnsr(frames, p)
        assert np.array_equal(read_tnsr(p), frames)

    def test_magic_checked(self, tmp_path):
        p = tmp_path / "bad.tnsr"
        p.write_bytes(b"XXXX" + b"\0" * 12)
        with pytest.raises(MalformedRow):
            read_tnsr(p)

    def test_size_checked(self, tmp_path):
        frames = np.zeros((2, 4, 4), dtype=np.float32)
        p = tmp_path / "clip.tnsr"
        write_tnsr(frames, p)
        p.write_bytes(p.read_bytes()[:-4])
        with pytest.raises(MalformedRow):
            read_tnsr(p)


class TestSampling:
    def test_indices_fps50(self):
        idx = window_indices(50, 0, 10, 1.0)
        assert idx.tolist() == [0, 6, 11, 17, 22, 28, 33, 39, 44, 50]

    def test_indices_fps30(self):
        idx = window_indices(30, 0, 10, 1.0)
        assert idx.tolist() == [0, 3, 7, 10, 13, 17, 20, 23, 27, 30]

    def test_window_out_of_range(self, rng):
        frames = rng.random((40, 16, 16))
        with pytest.raises(WindowOutOfRange):
            sample_clip(frames, 50, 0, 10, 1.0, H=8, W=8)

    def test_too_few_distinct_frames(self, rng):
        frames = rng.random((20, 16, 16))
        with pytest.raises(TooFewSourceFrames):
            sample_clip(frames, 5, 0, 10, 1.0, H=8, W=8)

    def test_clip_contract(self, rng):
        frames = rng.random((80, 16, 16))
        clip = sample_clip(frames, 50, 3, 10, 1.0, H=8, W=8, label=42.0)
        assert clip.shape == (10, 8, 8)
        assert clip.frames.min() >= 0.0 and clip.frames.max() <= 1.0
        assert np.all(np.diff(clip.t_indices) > 0)
        assert clip.t_indices[-1] - clip.t_indices[0] <= 50 * 1.0 + 1
        assert clip.label == 42.0

    def test_constant_clip_normalizes_to_zeros(self):
        frames = np.full((60, 8, 8), 0.7)
        clip = sample_clip(frames, 50, 0, 10, 1.0, H=8, W=8)
        assert np.all(clip.frames == 0.0)


class TestResize:
    def test_constant_preserved(self):
        out = resize_area(np.full((7, 5), 0.3), 3, 2)
        assert np.allclose(out, 0.3)

    def test_integer_factor_is_block_mean(self, rng):
        img = rng.random((8, 8))
        out = resize_area(img, 4, 4)
        blocks = img.reshape(4, 2, 4, 2).mean(axis=(1, 3))
        assert np.allclose(out, blocks, atol=1e-7)

    def test_identity(self, rng):
        img = rng.random((5, 9))
        assert np.allclose(resize_area(img, 5, 9), img)

    def test_mean_preserved(self, rng):
        img = rng.random((112, 112))
        out = resize_area(img, 32, 32)
        assert out.mean() == pytest.approx(img.mean(), abs=1e-5)


class TestSynthesize:
    def test_ef_analog_closed_form(self):
        spec = SyntheticSpec(r_max=10, r_min=7)
        _, ef = synthesize_clip(spec, 32, 32, seed=0)
        assert ef == pytest.approx(1 - 0.49)

    def test_invalid_radius_rejected(self):
        with pytest.raises(InvalidSpec):
            synthesize_clip(SyntheticSpec(r_max=10, r_min=10), 32, 32, seed=0)

    def test_deterministic(self):
        spec = SyntheticSpec(r_max=9, r_min=6, noise_sigma=0.1)
        a, _ = synthesize_clip(spec, 32, 32, seed=5)
        b, _ = synthesize_clip(spec, 32, 32, seed=5)
        assert np.array_equal(a.frames, b.frames)
        c, _ = synthesize_clip(spec, 32, 32, seed=6)
        assert not np.array_equal(a.frames, c.frames)

    def test_pixel_range_and_shape(self):
        spec = SyntheticSpec(r_max=12, r_min=8, noise_sigma=0.2, duration_s=0.5)
        clip, _ = synthesize_clip(spec, 32, 32, seed=1)
        assert clip.shape == (25, 32, 32)
        assert clip.frames.min() >= 0.0 and clip.frames.max() <= 1.0

    def test_radius_modulates_area(self):
        spec = SyntheticSpec(r_max=12, r_min=6, period_s=1.0, phase0=0.0, fps=40)
        clip, _ = synthesize_clip(spec, 32, 32, seed=0)
        areas = clip.frames.sum(axis=(1, 2))
        peak = oracle_start_frame(spec)
        assert areas[peak] == pytest.approx(areas.max(), rel=1e-3)

    @given(
        r_min=st.floats(min_value=1.0, max_value=9.0),
        r_min2=st.floats(min_value=1.0, max_value=9.0),
    )
    @settings(max_examples=50, deadline=None)
    def test_ef_monotone_in_r_min(self, r_min, r_min2):
        lo, hi = sorted((r_min, r_min2))
        if hi - lo < 1e-9:
            return
        ef_lo = SyntheticSpec(r_max=10, r_min=lo).ef_analog
        ef_hi = SyntheticSpec(r_max=10, r_min=hi).ef_analog
        assert ef_lo > ef_hi


class TestOracle:
    def test_synthetic_first_peak(self):
        spec = SyntheticSpec(r_max=10, r_min=7, period_s=1.0, phase0=0.0, fps=50)
        assert oracle_start_frame(spec) == 13  # round(50 * 0.25) rounding half up

    def test_record_lookup(self):
        r = ClipRecord("a", "a.tnsr", 40.0, "train", 50.0, [(17, 42)])
        assert oracle_start_frame(r) == 17

    def test_no_phase_info(self):
        r = ClipRecord("a", "a.tnsr", 40.0, "train", 50.0, [])
        with pytest.raises(NoPhaseInfo):
            oracle_start_frame(r)

    def test_phase_shifted_peak(self):
        spec = SyntheticSpec(r_max=10, r_min=7, period_s=1.0, phase0=math.pi / 2, fps=50)
        assert oracle_start_frame(spec) == 0  # sin already at maximum at t=0

    def test_es_after_ed_by_half_period(self):
        spec = SyntheticSpec(r_max=10, r_min=7, period_s=1.0, phase0=0.0, fps=50)
        ed, es = oracle_phase_pair(spec)
        assert (ed, es) == (13, 38)


def test_minmax_constant_fallback():
    assert np.all(minmax_normalize(np.full((2, 3, 3), 5.0)) == 0.0)
