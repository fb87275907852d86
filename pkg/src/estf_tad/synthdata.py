"""Synthetic untrimmed videos with exactly known action boundaries.

Each action is a drifting sinusoidal grating.  Classes come in pairs: the
pair fixes colour and orientation, the parity fixes which way the grating
drifts.  A single frame of class ``2k`` is therefore indistinguishable from
some frame of class ``2k + 1``; only motion separates them.

The grating's amplitude follows a product of two logistic ramps, one rising
at the start frame and one falling at the end frame, each with its own
sharpness.  Ramps are evaluated at frame centres ``t + 0.5`` against integer
boundaries, which makes time reversal an exact swap of the two sharpness
values.

Every video draws from two independent random streams keyed on
``(seed, split, index)``: stream 0 paints the background noise, stream 1
places the actions and picks their phases.  Changing only the ramp
sharpness leaves both streams untouched.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from .instances import GroundTruthInstance
from .metrics import AnnotationSet, VideoAnnotation, load_annotations, save_annotations
from .numerics import load_tensor, save_tensor

DIFFICULTY = {
    # noise std, pattern contrast
    "easy": (0.1, 1.0),
    "hard": (0.5, 0.6),
}
PALETTE = np.array([[1.0, 0.2, -0.6], [-0.5, 0.9, 0.3], [0.2, -0.7, 1.0], [0.8, 0.8, -0.8]])


class SpecError(ValueError):
    pass


@dataclass(frozen=True)
class SynthSpec:
    seed: int = 0
    n_videos: int = 64
    frames: int = 64
    height: int = 16
    width: int = 16
    channels: int = 3
    n_classes: int = 4
    actions_per_video: tuple[int, int] = (1, 2)
    duration_range: tuple[int, int] = (8, 24)
    difficulty: str = "easy"
    onset_sharpness: float = 4.0
    offset_sharpness: float = 4.0
    fps: float = 4.0
    wavelength: float = 16.0
    speed: float = 2.0  # pixels per frame
    min_gap: int = 2
    split: int = 0

    def validate(self) -> None:
        if self.difficulty not in DIFFICULTY:
            raise SpecError(f"difficulty must be one of {sorted(DIFFICULTY)}, got {self.difficulty!r}")
        for name in ("n_videos", "frames", "height", "width", "channels", "n_classes"):
            if getattr(self, name) < 1:
                raise SpecError(f"{name} must be positive")
        lo, hi = self.actions_per_video
        if not 0 <= lo <= hi:
            raise SpecError(f"actions_per_video must satisfy 0 <= lo <= hi, got {self.actions_per_video}")
        dlo, dhi = self.duration_range
        if not 1 <= dlo <= dhi:
            raise SpecError(f"duration_range must satisfy 1 <= lo <= hi, got {self.duration_range}")
        if hi * dhi + max(hi - 1, 0) * self.min_gap > self.frames:
            raise SpecError(
                f"cannot place {hi} actions of up to {dhi} frames with gaps of {self.min_gap} in {self.frames} frames"
            )
        if self.onset_sharpness <= 0 or self.offset_sharpness <= 0:
            raise SpecError("ramp sharpness values must be positive")
        if self.fps <= 0 or self.wavelength <= 0:
            raise SpecError("fps and wavelength must be positive")

    @property
    def labels(self) -> list[str]:
        return [f"class{c}" for c in range(self.n_classes)]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "SynthSpec":
        known = set(cls.__dataclass_fields__)
        unknown = sorted(set(doc) - known)
        if unknown:
            raise SpecError(f"unknown spec keys: {unknown}")
        doc = dict(doc)
        for key in ("actions_per_video", "duration_range"):
            if key in doc:
                doc[key] = tuple(doc[key])
        spec = cls(**doc)
        spec.validate()
        return spec


def ramp_profile(frames: int, start: int, end: int, onset: float, offset: float) -> np.ndarray:
    """Amplitude envelope at frame centres for an action on ``[start, end)``."""
    c = np.arange(frames) + 0.5
    return _sigmoid(onset * (c - start)) * _sigmoid(offset * (end - c))


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def class_pattern(spec: SynthSpec, label: int, phase: float) -> np.ndarray:
    """Unit-amplitude drifting grating [T, H, W, C] for ``label``."""
    pair, sign = divmod(label, 2)
    n_pairs = (spec.n_classes + 1) // 2
    theta = np.pi * pair / n_pairs  # orientation of the wave vector
    k = 2 * np.pi / spec.wavelength
    yy, xx = np.meshgrid(np.arange(spec.height), np.arange(spec.width), indexing="ij")
    proj = np.cos(theta) * xx + np.sin(theta) * yy
    direction = 1.0 if sign == 0 else -1.0
    t = np.arange(spec.frames)[:, None, None]
    wave = np.cos(k * (proj[None] - direction * spec.speed * t) + phase)
    colour = PALETTE[pair % len(PALETTE)]
    colour = np.resize(colour, spec.channels)
    return wave[..., None] * colour


def _place(spec: SynthSpec, rng: np.random.Generator) -> list[tuple[int, int, int, float]]:
    lo, hi = spec.actions_per_video
    n = int(rng.integers(lo, hi + 1))
    durations = rng.integers(spec.duration_range[0], spec.duration_range[1] + 1, size=n)
    labels = rng.integers(0, spec.n_classes, size=n)
    phases = rng.uniform(0, 2 * np.pi, size=n)
    slack = spec.frames - int(durations.sum()) - max(n - 1, 0) * spec.min_gap
    # split the slack into n + 1 non-negative gaps
    cuts = np.sort(rng.integers(0, slack + 1, size=n))
    gaps = np.diff(np.concatenate([[0], cuts]))
    out = []
    t = 0
    for i in range(n):
        t += int(gaps[i]) + (spec.min_gap if i else 0)
        out.append((t, t + int(durations[i]), int(labels[i]), float(phases[i])))
        t += int(durations[i])
    return out


def render_video(spec: SynthSpec, index: int) -> tuple[np.ndarray, list[tuple[int, int, int]]]:
    """One video and its ``(start_frame, end_frame, label)`` list."""
    noise, contrast = DIFFICULTY[spec.difficulty]
    bg_rng = np.random.default_rng([spec.seed, spec.split, index, 0])
    act_rng = np.random.default_rng([spec.seed, spec.split, index, 1])
    video = noise * bg_rng.standard_normal((spec.frames, spec.height, spec.width, spec.channels))
    actions = _place(spec, act_rng)
    for start, end, label, phase in actions:
        amp = ramp_profile(spec.frames, start, end, spec.onset_sharpness, spec.offset_sharpness)
        video += contrast * amp[:, None, None, None] * class_pattern(spec, label, phase)
    return video, [(s, e, c) for s, e, c, _ in actions]


def video_id(spec: SynthSpec, index: int) -> str:
    return f"s{spec.split}_v{index:04d}"


def generate(spec: SynthSpec) -> tuple[list[np.ndarray], AnnotationSet]:
    spec.validate()
    videos, entries = [], []
    duration = spec.frames / spec.fps
    for i in range(spec.n_videos):
        vid = video_id(spec, i)
        video, acts = render_video(spec, i)
        videos.append(video)
        insts = [GroundTruthInstance(s / spec.fps, e / spec.fps, c, vid) for s, e, c in acts]
        entries.append(VideoAnnotation(vid, duration, spec.fps, insts))
    return videos, AnnotationSet(spec.labels, entries)


def asymmetry_suite(spec: SynthSpec, fast: float = 4.0, slow: float = 0.5) -> tuple[SynthSpec, SynthSpec]:
    """(symmetric, asymmetric) specs that differ only in the offset ramp."""
    sym = replace(spec, onset_sharpness=fast, offset_sharpness=fast)
    asym = replace(spec, onset_sharpness=fast, offset_sharpness=slow)
    return sym, asym


def energy_ratio(video: np.ndarray, acts: list[tuple[int, int, int]]) -> float:
    """Mean power inside annotated frames over mean power outside all of them."""
    inside = np.zeros(video.shape[0], dtype=bool)
    for s, e, _ in acts:
        inside[s:e] = True
    power = (video ** 2).mean(axis=(1, 2, 3))
    if inside.all() or not inside.any():
        return float("inf") if inside.any() else 0.0
    return float(power[inside].mean() / power[~inside].mean())


def checksum(videos: list[np.ndarray], annos: AnnotationSet) -> str:
    h = hashlib.sha256()
    for v in videos:
        h.update(np.ascontiguousarray(v, dtype="<f8").tobytes())
    for v in annos.videos:
        for g in v.instances:
            h.update(f"{v.id}:{g.t_start!r}:{g.t_end!r}:{g.label};".encode())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# on-disk layout: <dir>/spec.json, <dir>/annotations.json, <dir>/videos/<id>.bin
# ---------------------------------------------------------------------------

def write_dataset(directory, spec: SynthSpec, videos, annos: AnnotationSet) -> Path:
    directory = Path(directory)
    (directory / "videos").mkdir(parents=True, exist_ok=True)
    for v, entry in zip(videos, annos.videos):
        save_tensor(directory / "videos" / f"{entry.id}.bin", v)
    save_annotations(directory / "annotations.json", annos)
    (directory / "spec.json").write_text(json.dumps(spec.to_dict(), indent=1) + "\n")
    return directory


def read_dataset(directory) -> tuple[list[np.ndarray], AnnotationSet]:
    directory = Path(directory)
    annos = load_annotations(directory / "annotations.json")
    videos = []
    for entry in annos.videos:
        path = directory / "videos" / f"{entry.id}.bin"
        if not path.exists():
            raise FileNotFoundError(f"{path}: video listed in annotations is missing")
        videos.append(load_tensor(path))
    return videos, annos


__all__ = [
    "DIFFICULTY",
    "SpecError",
    "SynthSpec",
    "asymmetry_suite",
    "checksum",
    "class_pattern",
    "energy_ratio",
    "generate",
    "ramp_profile",
    "read_dataset",
    "render_video",
    "video_id",
    "write_dataset",
]
