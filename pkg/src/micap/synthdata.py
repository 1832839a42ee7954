"""Procedural video / audio-caption / caption dataset.

Each sample is a latent event (subject, action, color, motion).  Frames show
the subject as a colored shape moving per the motion pattern; the audio
caption names only what can be heard (subject and action); the video
caption names everything.  Vision alone cannot tell the action of most
subjects and audio alone cannot tell color or motion.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    ArchiveVersionError,
    ConfigError,
    DataError,
    ManifestInconsistencyError,
    TruncatedBlobError,
)
from .metrics import tokenize_text

ARCHIVE_VERSION = "MICAP-DS-1"
MANIFEST_NAME = "manifest.json"
BLOBS_NAME = "blobs.bin"

SPECIALS = ("[PAD]", "[CLS]", "[EOS]", "[UNK]")
PAD, CLS, EOS, UNK = range(4)

SUBJECTS = ("man", "woman", "baby", "dog", "truck")
ACTIONS = ("talks", "sings", "coos", "barks", "revs", "plays")
COMPATIBLE = {
    "man": ("talks", "sings"),
    "woman": ("talks", "sings"),
    "baby": ("coos", "plays"),
    "dog": ("barks", "plays"),
    "truck": ("revs",),
}
GERUND = {"talks": "talking", "sings": "singing", "coos": "cooing",
          "barks": "barking", "revs": "revving", "plays": "playing"}
COLORS = {
    "red": (220, 40, 40),
    "green": (40, 170, 60),
    "blue": (40, 80, 220),
    "yellow": (230, 210, 40),
    "purple": (140, 60, 180),
    "orange": (240, 140, 30),
}
MOTIONS = ("horizontal", "vertical", "circular", "static")
MOTION_PHRASE = {
    "horizontal": "while moving horizontally",
    "vertical": "while moving vertically",
    "circular": "while moving in circles",
    "static": "while standing still",
}
# (width, height) in pixels at 32x32; discs use width as diameter
SHAPES = {
    "man": ("rect", 4.0, 10.0),
    "woman": ("disc", 8.0, 8.0),
    "baby": ("disc", 5.0, 5.0),
    "dog": ("rect", 9.0, 5.0),
    "truck": ("rect", 12.0, 7.0),
}

AUDIO_TEMPLATES = (
    "a {subject} is {ing}",
    "a {subject} is {ing} nearby",
    "someone hears a {subject} {ing}",
    "a {subject} is {ing} with background noise",
)
VIDEO_TEMPLATES = (
    "a {color} {subject} {action} {motion}",
    "the {color} {subject} {action} {motion}",
    "a {subject} that is {color} {action} {motion}",
)


@dataclass(frozen=True)
class Event:
    subject: str
    action: str
    color: str
    motion: str

    def __post_init__(self):
        if self.subject not in COMPATIBLE or self.action not in COMPATIBLE[self.subject]:
            raise ConfigError(f"incompatible event {self.subject!r}/{self.action!r}")
        if self.color not in COLORS or self.motion not in MOTIONS:
            raise ConfigError(f"unknown color/motion {self.color!r}/{self.motion!r}")


def video_caption(event: Event, template: int = 0) -> str:
    return VIDEO_TEMPLATES[template].format(
        color=event.color, subject=event.subject, action=event.action,
        motion=MOTION_PHRASE[event.motion])


def audio_caption(event: Event, template: int = 0) -> str:
    return AUDIO_TEMPLATES[template].format(subject=event.subject, ing=GERUND[event.action])


def all_events() -> list[Event]:
    return [Event(s, a, c, m) for s in SUBJECTS for a in COMPATIBLE[s]
            for c in COLORS for m in MOTIONS]


def grammar_captions() -> list[str]:
    """Every caption the generator can produce."""
    out = []
    for ev in all_events():
        out.extend(video_caption(ev, i) for i in range(len(VIDEO_TEMPLATES)))
        out.extend(audio_caption(ev, i) for i in range(len(AUDIO_TEMPLATES)))
    return out


# ---------------------------------------------------------------- vocabulary


@dataclass
class Vocabulary:
    tokens: list[str]

    def __post_init__(self):
        if tuple(self.tokens[:4]) != SPECIALS:
            raise ConfigError("vocabulary must start with [PAD] [CLS] [EOS] [UNK]")
        self.index = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self):
        return len(self.tokens)


def build_vocab(captions: Iterable[str]) -> Vocabulary:
    words = sorted({w for c in captions for w in tokenize_text(c)})
    return Vocabulary(list(SPECIALS) + words)


def tokenize(text: str, vocab: Vocabulary) -> list[int]:
    return [vocab.index.get(w, UNK) for w in tokenize_text(text)]


def detokenize(ids: Sequence[int], vocab: Vocabulary) -> str:
    return " ".join(vocab.tokens[i] for i in ids if i not in (PAD, CLS, EOS))


def encode_caption(text: str, vocab: Vocabulary, length: int) -> tuple[list[int], list[bool]]:
    """``[CLS] tokens [EOS]`` padded to ``length`` plus its validity mask."""
    ids = [CLS] + tokenize(text, vocab) + [EOS]
    if len(ids) > length:
        raise ConfigError(f"caption {text!r} needs {len(ids)} positions, only {length} available")
    n = len(ids)
    return ids + [PAD] * (length - n), [True] * n + [False] * (length - n)


# ---------------------------------------------------------------- rendering


@dataclass(frozen=True)
class Trajectory:
    centers: tuple[tuple[float, float], ...]  # (x, y) per frame
    size: tuple[float, float]
    kind: str
    pivot: tuple[float, float] | None = None  # circle centre for circular motion
    radius: float | None = None


def trajectory(event: Event, dims: tuple[int, int], frames: int, seed) -> Trajectory:
    h, w = dims
    scale = min(h, w) / 32.0
    kind, ow, oh = SHAPES[event.subject]
    ow, oh = ow * scale, oh * scale
    rng = np.random.default_rng(seed)
    margin = 1.0
    x_lo, x_hi = margin + ow / 2, w - margin - ow / 2
    y_lo, y_hi = margin + oh / 2, h - margin - oh / 2
    u = [t / (frames - 1) if frames > 1 else 0.0 for t in range(frames)]
    pivot = radius = None
    if event.motion == "horizontal":
        travel = rng.uniform(0.6, 1.0) * (x_hi - x_lo)
        x0 = rng.uniform(x_lo, x_hi - travel)
        y = rng.uniform(y_lo, y_hi)
        centers = [(x0 + travel * s, y) for s in u]
    elif event.motion == "vertical":
        travel = rng.uniform(0.6, 1.0) * (y_hi - y_lo)
        y0 = rng.uniform(y_lo, y_hi - travel)
        x = rng.uniform(x_lo, x_hi)
        centers = [(x, y0 + travel * s) for s in u]
    elif event.motion == "circular":
        r_max = min(x_hi - x_lo, y_hi - y_lo) / 2
        radius = rng.uniform(0.6, 1.0) * r_max
        pivot = (rng.uniform(x_lo + radius, x_hi - radius), rng.uniform(y_lo + radius, y_hi - radius))
        phase = rng.uniform(0, 2 * math.pi)
        centers = [(pivot[0] + radius * math.cos(phase + 2 * math.pi * t / frames),
                    pivot[1] + radius * math.sin(phase + 2 * math.pi * t / frames))
                   for t in range(frames)]
    else:
        centers = [(rng.uniform(x_lo, x_hi), rng.uniform(y_lo, y_hi))] * frames
    return Trajectory(tuple(centers), (ow, oh), kind, pivot, radius)


def render_frames(event: Event, dims: tuple[int, int], frames: int, seed) -> np.ndarray:
    """``(T, h, w, 3)`` uint8 frames of the event on a gray background."""
    h, w = dims
    if h < 8 or w < 8:
        raise ConfigError(f"frames of {h}x{w} are too small to draw on")
    traj = trajectory(event, dims, frames, seed)
    ys, xs = np.mgrid[0:h, 0:w] + 0.5
    out = np.full((frames, h, w, 3), 128, dtype=np.uint8)
    ow, oh = traj.size
    for t, (cx, cy) in enumerate(traj.centers):
        if traj.kind == "rect":
            inside = (np.abs(xs - cx) <= ow / 2) & (np.abs(ys - cy) <= oh / 2)
        else:
            inside = (xs - cx) ** 2 + (ys - cy) ** 2 <= (ow / 2) ** 2
        out[t][inside] = COLORS[event.color]
    return out


# ---------------------------------------------------------------- dataset


@dataclass
class Sample:
    id: str
    frames: np.ndarray
    video_caption: str
    audio_caption: str
    references: list[str]
    split: str = "train"
    event: Event | None = None


@dataclass
class DatasetArchive:
    h: int
    w: int
    frames: int
    audio_len: int
    vocab: Vocabulary
    samples: list[Sample] = field(default_factory=list)
    c: int = 3

    def manifest(self) -> dict:
        rows, offset = [], 0
        frame_len = self.frames * self.h * self.w * self.c
        for s in self.samples:
            row = {
                "id": s.id,
                "split": s.split,
                "frame_offset": offset,
                "frame_len": frame_len,
                "video_caption": s.video_caption,
                "audio_caption": s.audio_caption,
                "references": list(s.references),
            }
            if s.event is not None:
                row["event"] = {"subject": s.event.subject, "action": s.event.action,
                                "color": s.event.color, "motion": s.event.motion}
            rows.append(row)
            offset += frame_len
        return {"version": ARCHIVE_VERSION, "h": self.h, "w": self.w, "c": self.c,
                "T": self.frames, "S": self.audio_len, "vocab": list(self.vocab.tokens),
                "samples": rows}

    def to_bytes(self) -> tuple[bytes, bytes]:
        manifest = json.dumps(self.manifest(), indent=2, sort_keys=True).encode("utf-8") + b"\n"
        blobs = b"".join(np.ascontiguousarray(s.frames, dtype=np.uint8).tobytes() for s in self.samples)
        return manifest, blobs

    def split(self, name: str) -> list[Sample]:
        return [s for s in self.samples if s.split == name]

    def by_id(self, sample_id: str) -> Sample:
        for s in self.samples:
            if s.id == sample_id:
                return s
        raise DataError(f"no sample with id {sample_id!r}")


def generate_dataset(count: int, seed: int, dims: tuple[int, int] = (32, 32), frames: int = 4,
                     audio_len: int = 12, test_count: int = 0, references: int = 1) -> DatasetArchive:
    """Deterministic in ``seed``; sample ``i`` draws from its own stream ``(seed, i)``."""
    h, w = dims
    if count < 1 or test_count < 0 or frames < 1 or references < 1:
        raise ConfigError("count, frames and references must be positive")
    if h < 8 or w < 8:
        raise ConfigError(f"frames of {h}x{w} are too small")
    if references > len(VIDEO_TEMPLATES):
        raise ConfigError(f"at most {len(VIDEO_TEMPLATES)} references per sample")
    vocab = build_vocab(grammar_captions())
    archive = DatasetArchive(h, w, frames, audio_len, vocab)
    for i in range(count + test_count):
        rng = np.random.default_rng([seed, i])
        subject = SUBJECTS[rng.integers(len(SUBJECTS))]
        options = COMPATIBLE[subject]
        event = Event(subject, options[rng.integers(len(options))],
                      list(COLORS)[rng.integers(len(COLORS))], MOTIONS[rng.integers(len(MOTIONS))])
        audio = audio_caption(event, int(rng.integers(len(AUDIO_TEMPLATES))))
        frame_seed = int(rng.integers(2 ** 32))
        archive.samples.append(Sample(
            id=f"video{i:05d}",
            frames=render_frames(event, dims, frames, frame_seed),
            video_caption=video_caption(event, 0),
            audio_caption=audio,
            references=[video_caption(event, k) for k in range(references)],
            split="train" if i < count else "test",
            event=event,
        ))
    for s in archive.samples:
        encode_caption(s.audio_caption, vocab, audio_len)  # raises if S is too short
    return archive


def write_archive(archive: DatasetArchive, path: str | Path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    manifest, blobs = archive.to_bytes()
    (path / MANIFEST_NAME).write_bytes(manifest)
    (path / BLOBS_NAME).write_bytes(blobs)


def read_archive(path: str | Path) -> DatasetArchive:
    path = Path(path)
    try:
        manifest = json.loads((path / MANIFEST_NAME).read_text(encoding="utf-8"))
        blobs = (path / BLOBS_NAME).read_bytes()
    except FileNotFoundError as exc:
        raise DataError(f"{path}: missing {exc.filename}") from exc
    except json.JSONDecodeError as exc:
        raise ManifestInconsistencyError(f"{path / MANIFEST_NAME}: {exc}") from exc
    if manifest.get("version") != ARCHIVE_VERSION:
        raise ArchiveVersionError(
            f"{path}: version mismatch ({manifest.get('version')!r} != {ARCHIVE_VERSION!r})")
    try:
        h, w, c, t = manifest["h"], manifest["w"], manifest["c"], manifest["T"]
        archive = DatasetArchive(h, w, t, manifest["S"], Vocabulary(list(manifest["vocab"])), c=c)
        rows = manifest["samples"]
    except (KeyError, TypeError, ConfigError) as exc:
        raise ManifestInconsistencyError(f"{path}: malformed manifest ({exc})") from exc
    expected = t * h * w * c
    end = 0
    for row in rows:
        off, n = row["frame_offset"], row["frame_len"]
        if n != expected:
            raise ManifestInconsistencyError(
                f"{path}: sample {row['id']} frame_len {n} != T*h*w*c = {expected}")
        if off != end:
            raise ManifestInconsistencyError(f"{path}: sample {row['id']} offset {off} != {end}")
        if off + n > len(blobs):
            raise TruncatedBlobError(
                f"{path}: truncated blob for sample {row['id']} "
                f"(needs bytes {off}..{off + n}, file has {len(blobs)})")
        frames = np.frombuffer(blobs, dtype=np.uint8, count=n, offset=off).reshape(t, h, w, c).copy()
        ev = row.get("event")
        archive.samples.append(Sample(
            id=row["id"], frames=frames, video_caption=row["video_caption"],
            audio_caption=row["audio_caption"], references=list(row["references"]),
            split=row.get("split", "train"), event=Event(**ev) if ev else None))
        end = off + n
    if end != len(blobs):
        raise ManifestInconsistencyError(f"{path}: {len(blobs) - end} unreferenced trailing blob bytes")
    return archive

