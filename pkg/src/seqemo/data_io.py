"""WAV I/O, dataset manifests, feature cache files, and the synthetic prosody corpus.

Manifest format::

    # classes: neutral,sadness,happiness,surprise,questioning,anger
    path,label,speaker[,duration]
    wav/neutral_0000.wav,neutral,spk00,2.4130

Paths are relative to the manifest's directory (absolute paths also work).

Feature cache format (little-endian): ``b"MFCC"``, u32 version (1), u32 d,
u32 T, then d*T float32 values, row-major (d rows of T frames).
"""

from __future__ import annotations

import csv
import io
import logging
import struct
import warnings
import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dsp import SAMPLE_RATE, AudioClip
from .errors import CacheError, DataError
from .numeric import make_rng

log = logging.getLogger(__name__)

DEFAULT_CLASSES = ("neutral", "sadness", "happiness", "surprise", "questioning", "anger")


# -- WAV --------------------------------------------------------------------


def read_wav(path, allow_resample: bool = False) -> AudioClip:
    """Read a PCM 16-bit mono WAV file into samples scaled by 1/32768.

    Other sample rates are rejected unless ``allow_resample`` is set, in which
    case the signal is linearly interpolated to 16 kHz with a warning.
    """
    path = Path(path)
    try:
        with wave.open(str(path), "rb") as wf:
            channels = wf.getnchannels()
            width = wf.getsampwidth()
            rate = wf.getframerate()
            raw = wf.readframes(wf.getnframes())
    except wave.Error as exc:
        raise DataError(f"{path}: not a PCM WAV file ({exc})") from exc
    except EOFError as exc:
        raise DataError(f"{path}: truncated WAV file") from exc
    except OSError as exc:
        raise DataError(f"{path}: cannot read ({exc})") from exc
    if channels != 1:
        raise DataError(f"{path}: {channels} channels; only mono is supported")
    if width != 2:
        raise DataError(f"{path}: {8 * width}-bit samples; only 16-bit PCM is supported")
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    if rate != SAMPLE_RATE:
        if not allow_resample:
            raise DataError(f"{path}: sample rate {rate} Hz; expected {SAMPLE_RATE} Hz (enable resampling to convert)")
        warnings.warn(f"{path}: linearly resampling {rate} Hz -> {SAMPLE_RATE} Hz (lossy)", stacklevel=2)
        samples = linear_resample(samples, rate, SAMPLE_RATE)
    return AudioClip(samples=samples, sample_rate=SAMPLE_RATE, source=str(path))


def linear_resample(samples: np.ndarray, rate_in: int, rate_out: int) -> np.ndarray:
    count = int(round(len(samples) * rate_out / rate_in))
    t_out = np.arange(count) / rate_out
    t_in = np.arange(len(samples)) / rate_in
    return np.interp(t_out, t_in, samples)


def to_pcm16(samples: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(samples) * 32767.0), -32768, 32767).astype("<i2")


def write_wav(path, samples: np.ndarray, sample_rate: int = SAMPLE_RATE) -> None:
    """Write PCM 16-bit mono; float samples are expected in [-1, 1]."""
    pcm = to_pcm16(samples) if np.issubdtype(np.asarray(samples).dtype, np.floating) else np.asarray(samples, "<i2")
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(sample_rate)
        wf.writeframes(pcm.tobytes())


# -- manifests --------------------------------------------------------------


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    label: str
    speaker: str
    duration: float | None = None

    def resolve(self, root: Path) -> Path:
        p = Path(self.path)
        return p if p.is_absolute() else root / p


@dataclass
class Manifest:
    entries: list[ManifestEntry]
    classes: list[str]
    root: Path

    def label_indices(self) -> np.ndarray:
        lookup = {name: i for i, name in enumerate(self.classes)}
        return np.array([lookup[e.label] for e in self.entries], dtype=np.int64)

    def paths(self) -> list[Path]:
        return [e.resolve(self.root) for e in self.entries]


def load_manifest(path, check_files: bool = True) -> Manifest:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"{path}: cannot read manifest ({exc})") from exc
    lines = text.splitlines()
    if not any(line.strip() for line in lines):
        raise DataError(f"{path}: manifest is empty")
    first = lines[0].strip()
    if not first.startswith("#") or ":" not in first or first[1:].split(":", 1)[0].strip() != "classes":
        raise DataError(f"{path}:1: expected a '# classes: a,b,c' declaration line")
    classes = [c.strip() for c in first.split(":", 1)[1].split(",") if c.strip()]
    if len(classes) < 2 or len(set(classes)) != len(classes):
        raise DataError(f"{path}:1: need at least two distinct class names, got {classes}")
    reader = csv.reader(lines[1:])
    try:
        header = [h.strip() for h in next(reader)]
    except StopIteration:
        raise DataError(f"{path}:2: missing 'path,label,speaker' header") from None
    if header[:3] != ["path", "label", "speaker"] or header[3:] not in ([], ["duration"]):
        raise DataError(f"{path}:2: header must be 'path,label,speaker[,duration]', got {','.join(header)}")
    root = path.parent
    entries, seen = [], {}
    for lineno, row in enumerate(reader, start=3):
        if not row or (len(row) == 1 and not row[0].strip()) or row[0].startswith("#"):
            continue
        if len(row) != len(header):
            raise DataError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
        file_path, label, speaker = (v.strip() for v in row[:3])
        if label not in classes:
            raise DataError(f"{path}:{lineno}: label {label!r} is not one of the declared classes {classes}")
        if file_path in seen:
            raise DataError(f"{path}:{lineno}: duplicate path {file_path!r} (first seen on line {seen[file_path]})")
        seen[file_path] = lineno
        duration = None
        if len(row) > 3 and row[3].strip():
            try:
                duration = float(row[3])
            except ValueError:
                raise DataError(f"{path}:{lineno}: duration {row[3]!r} is not a number") from None
        entry = ManifestEntry(file_path, label, speaker, duration)
        if check_files and not entry.resolve(root).is_file():
            raise DataError(f"{path}:{lineno}: audio file {file_path!r} not found")
        entries.append(entry)
    if not entries:
        raise DataError(f"{path}: manifest has no entries")
    return Manifest(entries, classes, root)


def manifest_text(entries: list[ManifestEntry], classes: list[str]) -> str:
    with_duration = any(e.duration is not None for e in entries)
    buf = io.StringIO()
    buf.write(f"# classes: {','.join(classes)}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["path", "label", "speaker"] + (["duration"] if with_duration else []))
    for e in entries:
        row = [e.path, e.label, e.speaker]
        if with_duration:
            row.append("" if e.duration is None else f"{e.duration:.4f}")
        writer.writerow(row)
    return buf.getvalue()


def save_manifest(path, entries: list[ManifestEntry], classes: list[str]) -> None:
    Path(path).write_text(manifest_text(entries, classes), encoding="utf-8", newline="")


# -- feature cache ----------------------------------------------------------

CACHE_MAGIC = b"MFCC"
CACHE_VERSION = 1
_CACHE_HEADER = struct.Struct("<4sIII")


def feature_cache_bytes(coefficients: np.ndarray) -> bytes:
    coefficients = np.asarray(coefficients)
    if coefficients.ndim != 2:
        raise CacheError(f"feature matrix must be 2-D (d x T), got shape {coefficients.shape}")
    d, t = coefficients.shape
    return _CACHE_HEADER.pack(CACHE_MAGIC, CACHE_VERSION, d, t) + np.ascontiguousarray(coefficients, dtype="<f4").tobytes()


def feature_cache_write(coefficients: np.ndarray, path) -> None:
    """Store a d x T matrix as float32; float64 input is rounded to float32."""
    Path(path).write_bytes(feature_cache_bytes(coefficients))


def feature_cache_read(path) -> np.ndarray:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise CacheError(f"{path}: cannot read feature cache ({exc}); regenerate it with 'extract'") from exc
    if len(raw) < _CACHE_HEADER.size:
        raise CacheError(f"{path}: file too short for a cache header; regenerate it with 'extract'")
    magic, version, d, t = _CACHE_HEADER.unpack_from(raw)
    if magic != CACHE_MAGIC:
        raise CacheError(f"{path}: bad magic {magic!r}; regenerate it with 'extract'")
    if version != CACHE_VERSION:
        raise CacheError(f"{path}: cache version {version} (expected {CACHE_VERSION}); regenerate it with 'extract'")
    expected = _CACHE_HEADER.size + 4 * d * t
    if len(raw) != expected:
        raise CacheError(f"{path}: size {len(raw)} bytes, header implies {expected}; regenerate it with 'extract'")
    return np.frombuffer(raw, dtype="<f4", offset=_CACHE_HEADER.size).reshape(d, t).astype(np.float32)


# -- synthetic prosody corpus -----------------------------------------------

CONTOURS = {
    "neutral": "flat",
    "sadness": "fall",
    "happiness": "rise_fall",
    "surprise": "fall_rise",
    "questioning": "rise",
    "anger": "vibrato",
}
HARMONIC_AMPLITUDES = (1.0, 0.5, 0.25)


@dataclass(frozen=True)
class SynthSpec:
    num_classes: int = 6
    items_per_class: int = 100
    min_duration: float = 1.0
    max_duration: float = 4.0
    seed: int = 0
    noise_level: float = 0.02
    num_speakers: int = 10
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        if not 2 <= self.num_classes <= len(DEFAULT_CLASSES):
            raise DataError(f"num_classes must lie in [2, {len(DEFAULT_CLASSES)}], got {self.num_classes}")
        if self.items_per_class < 1:
            raise DataError(f"items_per_class must be >= 1, got {self.items_per_class}")
        if not 0 < self.min_duration <= self.max_duration:
            raise DataError(f"need 0 < min_duration <= max_duration, got {self.min_duration}, {self.max_duration}")
        if self.noise_level < 0:
            raise DataError(f"noise_level must be >= 0, got {self.noise_level}")
        if self.num_speakers < 1:
            raise DataError(f"num_speakers must be >= 1, got {self.num_speakers}")
        if self.sample_rate != SAMPLE_RATE:
            raise DataError(f"synthetic audio is generated at {SAMPLE_RATE} Hz only")

    @property
    def classes(self) -> list[str]:
        return list(DEFAULT_CLASSES[: self.num_classes])


def f0_contour(kind: str, t: np.ndarray, duration: float) -> np.ndarray:
    """Fundamental frequency in Hz over time ``t`` (seconds)."""
    u = t / duration
    if kind == "flat":
        return np.full_like(t, 150.0)
    if kind == "rise":
        return 120.0 + 120.0 * u
    if kind == "fall":
        return 240.0 - 120.0 * u
    if kind == "rise_fall":
        return 120.0 + 240.0 * np.minimum(u, 1.0 - u)
    if kind == "fall_rise":
        return 240.0 - 240.0 * np.minimum(u, 1.0 - u)
    if kind == "vibrato":
        return 180.0 + 20.0 * np.sin(2.0 * np.pi * 6.0 * t)
    raise ValueError(f"unknown contour {kind!r}")


def amplitude_envelope(n: int, sample_rate: int, ramp_seconds: float = 0.1) -> np.ndarray:
    ramp = min(int(ramp_seconds * sample_rate), n // 2)
    env = np.ones(n)
    if ramp:
        rise = 0.5 - 0.5 * np.cos(np.pi * np.arange(ramp) / ramp)
        env[:ramp] = rise
        env[n - ramp :] = rise[::-1]
    return env


def synth_utterance(kind: str, duration: float, jitter: float, noise_level: float, rng, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    n = int(round(duration * sample_rate))
    t = np.arange(n) / sample_rate
    f0 = f0_contour(kind, t, duration) * jitter
    phase = 2.0 * np.pi * np.cumsum(f0) / sample_rate
    tone = sum(a * np.sin(k * phase) for k, a in enumerate(HARMONIC_AMPLITUDES, start=1))
    tone *= 0.5 / sum(HARMONIC_AMPLITUDES)
    signal = tone * amplitude_envelope(n, sample_rate) + noise_level * rng.standard_normal(n)
    return np.clip(signal, -1.0, 1.0)


def generate_synth_dataset(spec: SynthSpec, out_dir) -> Manifest:
    """Render ``items_per_class`` WAVs per class plus ``manifest.csv`` into ``out_dir``.

    Item ``i`` draws its duration, F0 jitter (+-10%) and noise from a stream
    seeded by ``(spec.seed, i)``, so files are byte-identical across runs and
    independent of generation order.
    """
    out = Path(out_dir)
    (out / "wav").mkdir(parents=True, exist_ok=True)
    entries = []
    index = 0
    for c, label in enumerate(spec.classes):
        for j in range(spec.items_per_class):
            rng = make_rng(spec.seed, index)
            duration = float(rng.uniform(spec.min_duration, spec.max_duration))
            jitter = float(rng.uniform(0.9, 1.1))
            samples = synth_utterance(CONTOURS[label], duration, jitter, spec.noise_level, rng, spec.sample_rate)
            rel = f"wav/{label}_{j:04d}.wav"
            write_wav(out / rel, samples, spec.sample_rate)
            speaker = f"spk{index % spec.num_speakers:02d}"
            entries.append(ManifestEntry(rel, label, speaker, round(len(samples) / spec.sample_rate, 4)))
            index += 1
    save_manifest(out / "manifest.csv", entries, spec.classes)
    log.info("wrote %d synthetic utterances to %s", len(entries), out)
    return Manifest(entries, spec.classes, out)
