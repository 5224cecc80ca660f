"""Audio and annotation ingestion, log-frequency spectrograms, splits, synthetic data.

The audio chain is: WAV -> mono 22,050 Hz -> 10 s crop -> centered STFT
(frame 2048, hop 705, Hann) -> triangular filterbank with 24 bands per
octave from 65.4 Hz -> amplitude normalization -> log10(S + 1e-5).
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from scipy.io import wavfile

from .container import FormatError, load_file, save_file
from .models import EMOTIONS, MIDLEVEL, ConfigError

log = logging.getLogger(__name__)

SAMPLE_RATE = 22050
CROP_SECONDS = 10
CROP_SAMPLES = SAMPLE_RATE * CROP_SECONDS
FRAME_SIZE = 2048
HOP_SIZE = 705
BANDS_PER_OCTAVE = 24
FMIN = 65.4
LOG_FLOOR = 1e-5

EMOTION_RANGE = (1.0, 7.83)
MIDLEVEL_RANGE = (1.0, 10.0)

# Fixed concept -> emotion mixing for the synthetic corpus (8 x 7, full rank).
MIXING = np.array([
    [0.33, 0.33, -0.21, -0.02, -0.03, 0.41, -0.18],
    [-0.17, 0.40, -0.07, 0.43, -0.35, -0.16, 0.12],
    [-0.19, 0.32, 0.03, 0.39, 0.24, 0.11, 0.12],
    [-0.41, -0.04, 0.27, -0.27, 0.04, 0.33, -0.28],
    [0.39, 0.32, 0.28, -0.05, -0.08, 0.29, 0.34],
    [0.01, 0.30, 0.28, 0.24, 0.32, -0.40, -0.38],
    [0.05, -0.23, 0.25, -0.17, -0.38, 0.01, -0.24],
    [0.35, -0.06, -0.10, 0.44, -0.11, 0.15, -0.05],
])
MIXING_OFFSET = np.array([0.185, 0.4, -0.01, 0.68, -0.245, 0.315, 0.855, 0.19])

# Synthetic renderer: concept k fills its own block of frequency rows with a
# non-negative periodic texture 0.5 + 0.5 cos(2 pi (t / period_t + f / period_f)),
# scaled by z_k.  A zero period means "constant along that axis".
_TEXTURES = ((2, 0), (4, 0), (8, 0), (0, 2), (4, 4), (4, -4), (16, 0))
SYNTH_GAIN = 1.0


class IngestionError(OSError):
    """Audio or annotation input cannot be read."""


class ValidationError(ValueError):
    """Annotation values violate their declared ranges."""


# -- audio -----------------------------------------------------------------------

def load_audio(path: Path | str, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    """Read a PCM/float WAV file as a mono float64 signal at ``sample_rate``."""
    path = Path(path)
    try:
        rate, data = wavfile.read(path)
    except (ValueError, OSError) as exc:
        raise IngestionError(f"{path}: cannot read WAV ({exc})") from exc
    if data.dtype == np.uint8:
        signal = (data.astype(np.float64) - 128.0) / 128.0
    elif data.dtype == np.int16:
        signal = data.astype(np.float64) / 32768.0
    elif data.dtype == np.int32:
        # 24-bit files are returned left-justified in int32
        signal = data.astype(np.float64) / 2147483648.0
    elif data.dtype in (np.float32, np.float64):
        signal = data.astype(np.float64)
    else:
        raise IngestionError(f"{path}: unsupported sample format {data.dtype}")
    if signal.ndim == 2:
        signal = signal.mean(axis=1)
    signal = np.clip(signal, -1.0, 1.0)
    return resample_linear(signal, rate, sample_rate)


def resample_linear(signal: np.ndarray, rate: int, target: int = SAMPLE_RATE) -> np.ndarray:
    if rate == target or len(signal) == 0:
        return signal
    n_out = int(round(len(signal) * target / rate))
    t_out = np.arange(n_out) / target
    t_in = np.arange(len(signal)) / rate
    return np.interp(t_out, t_in, signal)


def crop_offset(n_samples: int, seed: int, clip_id: str, length: int = CROP_SAMPLES) -> int:
    """Deterministic crop start in samples derived from (seed, clip_id)."""
    slack = n_samples - length
    if slack <= 0:
        return 0
    digest = hashlib.sha256(f"{seed}:{clip_id}".encode()).digest()
    return int.from_bytes(digest[:8], "little") % (slack + 1)


def crop_10s(waveform: np.ndarray, seed: int, clip_id: str, length: int = CROP_SAMPLES) -> np.ndarray:
    """Pick ``length`` samples (10 s at 22,050 Hz); shorter input is zero-padded."""
    if len(waveform) == 0:
        raise IngestionError(f"clip {clip_id}: empty waveform")
    if len(waveform) < length:
        log.warning("clip %s: %.2f s shorter than crop, zero-padding tail", clip_id,
                    len(waveform) / SAMPLE_RATE)
        return np.concatenate([waveform, np.zeros(length - len(waveform))])
    start = crop_offset(len(waveform), seed, clip_id, length)
    return waveform[start:start + length]


# -- spectrogram ---------------------------------------------------------------------

def n_frames(n_samples: int, hop: int = HOP_SIZE) -> int:
    """Frame count of a centered STFT."""
    return 1 + n_samples // hop


def stft_magnitude(signal: np.ndarray, frame_size: int = FRAME_SIZE, hop: int = HOP_SIZE) -> np.ndarray:
    """Magnitude of a centered (reflect-padded) short-time DFT, shape (bins, frames)."""
    pad = frame_size // 2
    mode = "reflect" if len(signal) > pad else "constant"
    padded = np.pad(signal, pad, mode=mode)
    count = n_frames(len(signal), hop)
    idx = np.arange(frame_size)[None, :] + hop * np.arange(count)[:, None]
    window = np.hanning(frame_size + 1)[:-1]  # periodic Hann
    frames = padded[idx] * window
    return np.abs(np.fft.rfft(frames, axis=1)).T


def filter_centers(sample_rate: int = SAMPLE_RATE, fmin: float = FMIN,
                   bands_per_octave: int = BANDS_PER_OCTAVE) -> np.ndarray:
    nyquist = sample_rate / 2
    count = int(np.floor(bands_per_octave * np.log2(nyquist / fmin))) + 1
    return fmin * 2.0 ** (np.arange(count) / bands_per_octave)


def log_filterbank(frame_size: int = FRAME_SIZE, sample_rate: int = SAMPLE_RATE, fmin: float = FMIN,
                   bands_per_octave: int = BANDS_PER_OCTAVE) -> np.ndarray:
    """Triangular filters on a logarithmic axis, shape (bands, frame_size // 2 + 1).

    Each filter peaks at its center and reaches zero at the neighbouring
    centers.  Filters narrower than the DFT bin spacing would catch no bin;
    they get the single nearest bin instead.
    """
    centers = filter_centers(sample_rate, fmin, bands_per_octave)
    step = 2.0 ** (1.0 / bands_per_octave)
    lower = centers / step
    upper = np.minimum(centers * step, sample_rate / 2)
    freqs = np.fft.rfftfreq(frame_size, 1.0 / sample_rate)
    rising = (freqs[None, :] - lower[:, None]) / (centers - lower)[:, None]
    falling = (upper[:, None] - freqs[None, :]) / np.maximum(upper - centers, 1e-12)[:, None]
    bank = np.clip(np.minimum(rising, falling), 0.0, None)
    bank[:, freqs > sample_rate / 2] = 0.0
    empty = bank.sum(axis=1) == 0
    for row in np.flatnonzero(empty):
        bank[row, np.argmin(np.abs(freqs - centers[row]))] = 1.0
    return bank


def normalize_spectrogram(mag: np.ndarray) -> np.ndarray:
    """Scale so the maximum is 1, then ``log10(S + 1e-5)``."""
    mag = np.asarray(mag, dtype=np.float64)
    peak = mag.max() if mag.size else 0.0
    if peak > 0:
        mag = mag / peak
    return np.log10(mag + LOG_FLOOR)


def spectrogram(waveform: np.ndarray, sample_rate: int = SAMPLE_RATE, bank: np.ndarray | None = None) -> np.ndarray:
    """Log-frequency, log-magnitude spectrogram of shape (1, bands, frames), float32."""
    if sample_rate != SAMPLE_RATE:
        raise ConfigError(f"spectrogram expects {SAMPLE_RATE} Hz audio, got {sample_rate}")
    bank = log_filterbank() if bank is None else bank
    filtered = bank @ stft_magnitude(np.asarray(waveform, dtype=np.float64))
    return normalize_spectrogram(filtered)[None].astype(np.float32)


# -- annotations ------------------------------------------------------------------------

@dataclass
class AnnotationTable:
    clip_ids: list[str]
    emotions: np.ndarray
    midlevel: np.ndarray | None = None
    emotion_range: tuple[float, float] = EMOTION_RANGE
    midlevel_range: tuple[float, float] = MIDLEVEL_RANGE
    normalized: bool = False


def _read_csv(path: Path, columns: Sequence[str]) -> dict[str, np.ndarray]:
    try:
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            missing = [c for c in ("clip_id", *columns) if c not in (reader.fieldnames or ())]
            if missing:
                raise IngestionError(f"{path}: missing columns {missing}")
            rows = {}
            for row in reader:
                rows[row["clip_id"].strip()] = np.array([float(row[c]) for c in columns])
    except OSError as exc:
        raise IngestionError(f"{path}: {exc}") from exc
    return rows


def read_annotations(emotion_csv: Path | str, midlevel_csv: Path | str | None = None) -> AnnotationTable:
    """Load emotion ratings and (optionally) mid-level ratings keyed by clip_id."""
    emo = _read_csv(Path(emotion_csv), EMOTIONS)
    ids = list(emo)
    mid = None
    if midlevel_csv is not None:
        rows = _read_csv(Path(midlevel_csv), MIDLEVEL)
        lacking = [c for c in ids if c not in rows]
        if lacking:
            raise ValidationError(f"no mid-level ratings for clips {lacking}")
        mid = np.stack([rows[c] for c in ids])
    return AnnotationTable(ids, np.stack([emo[c] for c in ids]), mid)


def _check_range(values: np.ndarray, bounds: tuple[float, float], ids: Sequence[str], what: str) -> None:
    lo, hi = bounds
    bad = np.flatnonzero(((values < lo) | (values > hi)).any(axis=1))
    if bad.size:
        raise ValidationError(f"{what} ratings outside [{lo}, {hi}] for clips "
                              f"{[ids[i] for i in bad]}")


def normalize_targets(table: AnnotationTable) -> AnnotationTable:
    """Map ratings from their declared ranges onto [0, 1] (per-column min-max)."""
    _check_range(table.emotions, table.emotion_range, table.clip_ids, "emotion")
    lo, hi = table.emotion_range
    emotions = (table.emotions - lo) / (hi - lo)
    midlevel = None
    if table.midlevel is not None:
        _check_range(table.midlevel, table.midlevel_range, table.clip_ids, "mid-level")
        mlo, mhi = table.midlevel_range
        midlevel = (table.midlevel - mlo) / (mhi - mlo)
    return AnnotationTable(list(table.clip_ids), emotions, midlevel, table.emotion_range,
                           table.midlevel_range, normalized=True)


def denormalize(values: np.ndarray, bounds: tuple[float, float]) -> np.ndarray:
    lo, hi = bounds
    return np.asarray(values) * (hi - lo) + lo


# -- datasets -------------------------------------------------------------------------------

@dataclass
class Sample:
    clip_id: str
    spectrogram: np.ndarray
    y_emotion: np.ndarray
    y_midlevel: np.ndarray | None = None
    crop_offset_seconds: float = 0.0


@dataclass
class Dataset:
    """Column-oriented corpus: inputs (n, 1, F, T) and targets in [0, 1]."""

    clip_ids: list[str]
    x: np.ndarray
    y_emotion: np.ndarray
    y_midlevel: np.ndarray | None = None
    offsets: list[float] = field(default_factory=list)

    def __post_init__(self):
        if not self.offsets:
            self.offsets = [0.0] * len(self.clip_ids)

    def __len__(self) -> int:
        return len(self.clip_ids)

    def __iter__(self) -> Iterator[Sample]:
        for i in range(len(self)):
            yield self[i]

    def __getitem__(self, i: int) -> Sample:
        mid = None if self.y_midlevel is None else self.y_midlevel[i]
        return Sample(self.clip_ids[i], self.x[i], self.y_emotion[i], mid, self.offsets[i])

    def subset(self, idx: Sequence[int]) -> "Dataset":
        idx = np.asarray(idx, dtype=int)
        mid = None if self.y_midlevel is None else self.y_midlevel[idx]
        return Dataset([self.clip_ids[i] for i in idx], self.x[idx], self.y_emotion[idx], mid,
                       [self.offsets[i] for i in idx])


@dataclass(frozen=True)
class DatasetSplit:
    train: tuple[int, ...]
    val: tuple[int, ...]
    test: tuple[int, ...]
    split_seed: int

    def sizes(self) -> tuple[int, int, int]:
        return len(self.train), len(self.val), len(self.test)


def make_split(n: int, seed: int) -> DatasetSplit:
    """Seeded shuffle followed by a contiguous 80/10/10 partition."""
    if n < 10:
        raise ConfigError(f"need at least 10 samples to split, got {n}")
    order = np.random.default_rng(seed).permutation(n)
    n_val = int(round(0.1 * n))
    n_test = int(round(0.1 * n))
    n_train = n - n_val - n_test
    as_tuple = lambda a: tuple(int(i) for i in a)  # noqa: E731
    return DatasetSplit(as_tuple(order[:n_train]), as_tuple(order[n_train:n_train + n_val]),
                        as_tuple(order[n_train + n_val:]), seed)


def concept_patterns(shape: tuple[int, int]) -> np.ndarray:
    """Basis image of each concept over the (F, T) grid: (7, F, T).

    The frequency axis is cut into seven contiguous bands, one per concept.
    Patterns are non-negative with disjoint support, so the rendered image is
    linear in z and every band carries a texture of its own.
    """
    n_freq, n_time = shape
    f = np.arange(n_freq)[:, None]
    t = np.arange(n_time)[None, :]
    out = np.zeros((len(_TEXTURES), n_freq, n_time))
    bands = np.array_split(np.arange(n_freq), len(_TEXTURES))
    for k, ((pt, pf), rows) in enumerate(zip(_TEXTURES, bands)):
        phase = (t / pt if pt else 0 * t) + (f / pf if pf else 0 * f)
        texture = 0.5 + 0.5 * np.cos(2 * np.pi * phase)
        out[k, rows] = texture[rows]
    return out


def emotions_from_concepts(z: np.ndarray) -> np.ndarray:
    return np.clip(z @ MIXING.T + MIXING_OFFSET, 0.0, 1.0)


def render_concepts(z: np.ndarray, shape: tuple[int, int], noise: np.ndarray | None = None) -> np.ndarray:
    """Spectrogram-like images (n, 1, F, T) for concept vectors ``z`` (n, 7)."""
    img = SYNTH_GAIN * np.tensordot(z, concept_patterns(shape), axes=(1, 0))
    if noise is not None:
        img = img + noise
    return img[:, None].astype(np.float32)


def synth_dataset(n: int, shape: tuple[int, int] = (32, 64), seed: int = 0, noise: float = 0.05) -> Dataset:
    """Desk-scale corpus with known concepts.

    ``y_midlevel`` is the latent concept vector z ~ U[0, 1]^7 and
    ``y_emotion = clip01(MIXING @ z + MIXING_OFFSET)``; the input is the
    fixed band textures weighted by z plus Gaussian noise.
    """
    if n < 20:
        raise ConfigError(f"synthetic corpus needs n >= 20, got {n}")
    n_freq, n_time = shape
    if n_freq < len(_TEXTURES) or n_time < 2:
        raise ConfigError(f"synthetic shape {shape} too small: need F >= {len(_TEXTURES)} and T >= 2")
    rng = np.random.default_rng(seed)
    z = rng.uniform(0.0, 1.0, size=(n, len(MIDLEVEL)))
    eps = rng.normal(0.0, noise, size=(n, n_freq, n_time)) if noise > 0 else None
    x = render_concepts(z, shape, eps)
    ids = [f"synth{seed}_{i:05d}" for i in range(n)]
    return Dataset(ids, x, emotions_from_concepts(z).astype(np.float32), z.astype(np.float32))


# -- corpus preparation and cache ---------------------------------------------------------------

def clip_filename(clip_id: str) -> str:
    return re.sub(r"[^A-Za-z0-9._-]", "_", clip_id)


def prepare_corpus(audio_dir: Path | str, emotion_csv: Path | str, midlevel_csv: Path | str | None = None,
                   seed: int = 0) -> Dataset:
    """Read every annotated clip ``<audio_dir>/<clip_id>.wav`` into a Dataset."""
    audio_dir = Path(audio_dir)
    table = normalize_targets(read_annotations(emotion_csv, midlevel_csv))
    paths = {c: audio_dir / f"{c}.wav" for c in table.clip_ids}
    missing = [str(p) for p in paths.values() if not p.is_file()]
    if missing:
        raise IngestionError(f"{len(missing)} audio files missing: {missing}")
    bank = log_filterbank()
    specs, offsets = [], []
    for clip in table.clip_ids:
        wave = load_audio(paths[clip])
        start = crop_offset(len(wave), seed, clip)
        specs.append(spectrogram(crop_10s(wave, seed, clip), bank=bank))
        offsets.append(start / SAMPLE_RATE)
    mid = None if table.midlevel is None else table.midlevel.astype(np.float32)
    return Dataset(list(table.clip_ids), np.stack(specs), table.emotions.astype(np.float32), mid, offsets)


def write_cache(data: Dataset, cache_dir: Path | str, digest: str = "") -> Path:
    """Write per-clip tensor files plus ``manifest.json``; returns the manifest path."""
    cache_dir = Path(cache_dir)
    cache_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for s in data:
        name = f"{clip_filename(s.clip_id)}.bin"
        save_file(cache_dir / name, {"spectrogram": np.asarray(s.spectrogram, dtype=np.float32)})
        entries.append({
            "clip_id": s.clip_id,
            "file": name,
            "offset_seconds": float(s.crop_offset_seconds),
            "y_emotion": [float(v) for v in s.y_emotion],
            "y_midlevel": None if s.y_midlevel is None else [float(v) for v in s.y_midlevel],
        })
    manifest = {"version": 1, "digest": digest, "n": len(entries), "clips": entries}
    path = cache_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return path


def read_manifest(cache_dir: Path | str) -> dict | None:
    path = Path(cache_dir) / "manifest.json"
    if not path.is_file():
        return None
    return json.loads(path.read_text())


def read_cache(cache_dir: Path | str) -> Dataset:
    cache_dir = Path(cache_dir)
    manifest = read_manifest(cache_dir)
    if manifest is None:
        raise IngestionError(f"{cache_dir}: no manifest.json; run `prepare` first")
    xs, ys, ms, ids, offs = [], [], [], [], []
    for entry in manifest["clips"]:
        try:
            _, arrays = load_file(cache_dir / entry["file"])
        except (OSError, FormatError) as exc:
            raise IngestionError(f"{cache_dir / entry['file']}: {exc}") from exc
        xs.append(arrays["spectrogram"])
        ys.append(entry["y_emotion"])
        ms.append(entry["y_midlevel"])
        ids.append(entry["clip_id"])
        offs.append(entry["offset_seconds"])
    mid = None if any(m is None for m in ms) else np.asarray(ms, dtype=np.float32)
    return Dataset(ids, np.stack(xs), np.asarray(ys, dtype=np.float32), mid, offs)
