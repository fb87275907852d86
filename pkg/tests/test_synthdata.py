from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from estf_tad.instances import ActionInstance
from estf_tad.metrics import evaluate
from estf_tad.synthdata import (
    SpecError,
    SynthSpec,
    _place,
    asymmetry_suite,
    checksum,
    class_pattern,
    energy_ratio,
    generate,
    ramp_profile,
    read_dataset,
    render_video,
    write_dataset,
)

FIXTURES = Path(__file__).parent / "fixtures"


def test_same_seed_bit_identical():
    spec = SynthSpec(n_videos=3)
    v1, a1 = generate(spec)
    v2, a2 = generate(spec)
    assert all(np.array_equal(x, y) for x, y in zip(v1, v2))
    assert a1 == a2


def test_golden_checksum():
    expected = (FIXTURES / "synth_checksum.txt").read_text().split()[0]
    assert checksum(*generate(SynthSpec(n_videos=4))) == expected


def test_different_seed_differs():
    a = generate(SynthSpec(n_videos=2, seed=0))[0]
    b = generate(SynthSpec(n_videos=2, seed=1))[0]
    assert not np.array_equal(a[0], b[0])


def test_zero_actions_is_pure_background():
    spec = SynthSpec(n_videos=2, actions_per_video=(0, 0))
    videos, annos = generate(spec)
    assert all(not v.instances for v in annos.videos)
    bg = 0.1 * np.random.default_rng([0, 0, 1, 0]).standard_normal(videos[1].shape)
    assert np.array_equal(videos[1], bg)


def test_self_match_is_perfect():
    spec = SynthSpec(n_videos=6, actions_per_video=(1, 3), duration_range=(4, 12))
    _, annos = generate(spec)
    preds = [ActionInstance(g.t_start, g.t_end, g.label, 1.0, g.video) for g in annos.ground_truth()]
    assert evaluate(preds, annos).average_map == 1.0


def test_annotations_well_formed_and_exact():
    spec = SynthSpec(n_videos=20, actions_per_video=(0, 3), duration_range=(2, 16))
    _, annos = generate(spec)
    for v in annos.videos:
        prev_end = -1.0
        for g in sorted(v.instances, key=lambda g: g.t_start):
            assert 0 <= g.t_start < g.t_end <= v.duration
            assert g.t_start * spec.fps == int(g.t_start * spec.fps)
            assert g.t_start >= prev_end + spec.min_gap / spec.fps
            prev_end = g.t_end


def test_infeasible_placement():
    with pytest.raises(SpecError, match="cannot place"):
        SynthSpec(actions_per_video=(1, 4), duration_range=(8, 20)).validate()
    with pytest.raises(SpecError):
        SynthSpec(difficulty="medium").validate()


@pytest.mark.parametrize("difficulty", ["easy", "hard"])
def test_snr_floor(difficulty):
    spec = SynthSpec(n_videos=16, difficulty=difficulty)
    for i in range(spec.n_videos):
        video, acts = render_video(spec, i)
        if acts:
            assert energy_ratio(video, acts) > 1.0


def test_opposite_directions_share_frames():
    spec = SynthSpec()
    k = 2 * np.pi / spec.wavelength
    fwd = class_pattern(spec, 0, 0.3)
    for t in (1, 5, 9):
        # a frame of one direction is a phase-shifted first frame of the other
        other = class_pattern(spec, 1, 0.3 - k * spec.speed * t)
        np.testing.assert_allclose(fwd[t], other[0], atol=1e-12)
    back = class_pattern(spec, 1, 0.3)
    assert not np.allclose(fwd[1] - fwd[0], back[1] - back[0])


class TestAsymmetry:
    def test_symmetric_metadata(self):
        sym, asym = asymmetry_suite(SynthSpec())
        assert sym.onset_sharpness == sym.offset_sharpness
        assert asym.onset_sharpness > asym.offset_sharpness

    def test_time_reversal_swaps_sharpness(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            t = int(rng.integers(8, 80))
            s = int(rng.integers(0, t - 1))
            e = int(rng.integers(s + 1, t + 1))
            on, off = rng.uniform(0.2, 6, 2)
            fwd = ramp_profile(t, s, e, on, off)
            assert np.array_equal(fwd[::-1], ramp_profile(t, t - e, t - s, off, on))

    def test_pair_shares_background_and_placement(self):
        base = SynthSpec(n_videos=5)
        sym, asym = asymmetry_suite(base)
        vs, a_s = generate(sym)
        va, a_a = generate(asym)
        assert [v.instances for v in a_s.videos] == [v.instances for v in a_a.videos]
        for i in range(base.n_videos):
            # only the offset ramp differs, so the difference is pure signal
            phases = np.random.default_rng([0, 0, i, 1])
            expected = np.zeros_like(vs[i])
            for start, end, label, phase in _place(base, phases):
                d = ramp_profile(base.frames, start, end, 4.0, 4.0) - ramp_profile(base.frames, start, end, 4.0, 0.5)
                expected += d[:, None, None, None] * class_pattern(base, label, phase)
            np.testing.assert_allclose(vs[i] - va[i], expected, atol=1e-12)


def test_dataset_roundtrip(tmp_path):
    spec = SynthSpec(n_videos=3)
    videos, annos = generate(spec)
    write_dataset(tmp_path, spec, videos, annos)
    v2, a2 = read_dataset(tmp_path)
    assert a2 == annos
    assert all(np.array_equal(x, y) for x, y in zip(videos, v2))
    assert SynthSpec.from_dict(spec.to_dict()) == spec


def test_spec_rejects_unknown_keys():
    with pytest.raises(SpecError, match="bogus"):
        SynthSpec.from_dict({"bogus": 1})
