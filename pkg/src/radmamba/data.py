"""Micro-Doppler spectrograms: synthesis, STFT, dataset layout and windowing.

The synthetic generator models a radar return as a bulk (torso) tone plus a
sinusoidally phase-modulated limb component, optionally with a linear chirp
for fall-like motion.  Spectrograms are magnitude STFTs in dB, clipped to a
fixed dynamic range and scaled to [0, 1].
"""

from __future__ import annotations

import csv
import json
import logging
import math
import os
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .tensor import FormatError
from .tensor import load as load_tensor
from .tensor import save as save_tensor

log = logging.getLogger(__name__)

DEFAULT_FFT_LEN = 256
DEFAULT_HOP = 8
DEFAULT_SAMPLE_RATE = 512.0
DEFAULT_TIME_BINS = 224
DEFAULT_DOPPLER_BINS = 224
DYNAMIC_RANGE_DB = 40.0


class DataError(ValueError):
    """Raised for unreadable inputs or inconsistent dataset definitions."""


class NyquistError(DataError):
    pass


@dataclass(frozen=True)
class SynthClass:
    """Parameters of one synthetic activity.

    ``limb_amp_hz`` is the peak Doppler swing of the limb component around
    ``bulk_velocity_hz``; ``chirp_hz_per_s`` adds a torso ramp lasting
    ``chirp_duration_s`` (a fall).  ``noise_db`` is the complex noise power
    relative to a unit-amplitude return; ``-inf`` disables noise.
    """

    name: str
    bulk_velocity_hz: float = 0.0
    limb_amp_hz: float = 0.0
    limb_rate_hz: float = 1.0
    noise_db: float = -25.0
    torso_gain: float = 0.5
    chirp_hz_per_s: float = 0.0
    chirp_duration_s: float = 0.0

    def __post_init__(self):
        if self.limb_rate_hz <= 0:
            raise DataError(f"{self.name}: limb_rate_hz must be > 0")
        if self.chirp_duration_s < 0:
            raise DataError(f"{self.name}: chirp_duration_s must be >= 0")

    @property
    def max_doppler_hz(self) -> float:
        return abs(self.bulk_velocity_hz) + abs(self.limb_amp_hz) + abs(self.chirp_hz_per_s) * self.chirp_duration_s


DEFAULT_CLASSES: tuple[SynthClass, ...] = (
    SynthClass("idle", bulk_velocity_hz=0.0, limb_amp_hz=4.0, limb_rate_hz=0.3),
    SynthClass("walk", bulk_velocity_hz=40.0, limb_amp_hz=60.0, limb_rate_hz=1.0),
    SynthClass("wave", bulk_velocity_hz=0.0, limb_amp_hz=90.0, limb_rate_hz=1.5, torso_gain=0.3),
    SynthClass("fall", bulk_velocity_hz=0.0, limb_amp_hz=10.0, limb_rate_hz=0.5, chirp_hz_per_s=-120.0, chirp_duration_s=1.0),
)


@dataclass
class Spectrogram:
    """``data`` is (C, H, W): channels x Doppler bins (ascending) x time bins, values in [0, 1].

    ``label`` is a class id, or a length-W per-time-bin array for continuous
    recordings.
    """

    data: np.ndarray
    doppler_hz_per_bin: float = 1.0
    seconds_per_bin: float = 1.0
    label: int | np.ndarray | None = None

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3 or min(self.data.shape) < 1:
            raise DataError(f"spectrogram must be (C, H, W) with non-empty extents, got {self.data.shape}")
        if self.data.size and (self.data.min() < 0 or self.data.max() > 1):
            raise DataError("spectrogram values must lie in [0, 1]")
        if isinstance(self.label, (list, tuple, np.ndarray)):
            self.label = np.asarray(self.label, dtype=np.int64)
            if self.label.shape != (self.data.shape[2],):
                raise DataError(f"per-bin label length {self.label.shape} != time bins {self.data.shape[2]}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    @property
    def continuous(self) -> bool:
        return isinstance(self.label, np.ndarray)


@dataclass(frozen=True)
class WindowSpec:
    frame_len: int = 224
    stride: int = 1

    def __post_init__(self):
        if not 1 <= self.stride <= self.frame_len:
            raise DataError(f"window needs 1 <= stride <= frame_len, got stride={self.stride}, frame_len={self.frame_len}")


# signal synthesis -------------------------------------------------------------
def synth_signal(
    cls: SynthClass,
    duration_s: float,
    sample_rate: float,
    rng_seed: int | np.random.SeedSequence | None = 0,
    n_samples: int | None = None,
) -> np.ndarray:
    """Complex baseband return of one activity.

    The limb term has instantaneous frequency ``f_b + A sin(2 pi r t + phi)``;
    the torso term sits at ``f_b`` (plus the chirp ramp, if any).
    """
    if sample_rate <= 2 * cls.max_doppler_hz:
        raise NyquistError(
            f"{cls.name}: sample_rate {sample_rate} Hz must exceed twice the peak Doppler {cls.max_doppler_hz} Hz"
        )
    n = int(round(duration_s * sample_rate)) if n_samples is None else int(n_samples)
    rng = np.random.default_rng(rng_seed)
    t = np.arange(n) / sample_rate
    phi = rng.uniform(0, 2 * np.pi)
    f_b, A, r = cls.bulk_velocity_hz, cls.limb_amp_hz, cls.limb_rate_hz
    limb_phase = 2 * np.pi * (f_b * t - A / (2 * np.pi * r) * np.cos(2 * np.pi * r * t + phi))
    torso_phase = 2 * np.pi * f_b * t
    if cls.chirp_hz_per_s and cls.chirp_duration_s:
        # ramp up during the fall, then the body lies still
        span = max(duration_s - cls.chirp_duration_s, 0.0)
        t0 = rng.uniform(0.25 * span, 0.75 * span)
        tau = np.clip(t - t0, 0.0, None)
        during = tau <= cls.chirp_duration_s
        ramp = np.where(during, 0.5 * cls.chirp_hz_per_s * tau**2, 0.0)
        torso_phase = torso_phase + 2 * np.pi * ramp
        limb_phase = limb_phase + 2 * np.pi * ramp
    s = np.exp(1j * limb_phase) + cls.torso_gain * np.exp(1j * torso_phase)
    if np.isfinite(cls.noise_db):
        sigma = math.sqrt(10 ** (cls.noise_db / 10) / 2)
        s = s + sigma * (rng.standard_normal(n) + 1j * rng.standard_normal(n))
    return s


def _periodic_hann(n: int) -> np.ndarray:
    return np.hanning(n + 1)[:-1]


def stft(
    signal: np.ndarray,
    fft_len: int = DEFAULT_FFT_LEN,
    hop: int = DEFAULT_HOP,
    sample_rate: float = DEFAULT_SAMPLE_RATE,
    dynamic_range_db: float = DYNAMIC_RANGE_DB,
    window: str = "hann",
) -> Spectrogram:
    """Magnitude STFT with zero Doppler centred (row ``fft_len // 2``)."""
    signal = np.asarray(signal)
    if signal.ndim != 1:
        raise DataError(f"stft expects a 1-D signal, got shape {signal.shape}")
    if len(signal) < fft_len:
        raise DataError(f"signal of {len(signal)} samples is shorter than one frame ({fft_len})")
    if window != "hann":
        raise DataError(f"unsupported window {window!r}")
    frames = np.lib.stride_tricks.sliding_window_view(signal, fft_len)[::hop]
    spec = np.fft.fftshift(np.fft.fft(frames * _periodic_hann(fft_len), axis=1), axes=1)
    mag = np.abs(spec).T
    return Spectrogram(
        normalize_db(mag, dynamic_range_db)[None],
        doppler_hz_per_bin=sample_rate / fft_len,
        seconds_per_bin=hop / sample_rate,
    )


def normalize_db(mag: np.ndarray, dynamic_range_db: float = DYNAMIC_RANGE_DB) -> np.ndarray:
    """Convert magnitudes to dB, clip ``dynamic_range_db`` below the peak, scale to [0, 1]."""
    peak = float(mag.max()) if mag.size else 0.0
    if peak <= 0:
        return np.zeros_like(mag, dtype=np.float32)
    db = 20 * np.log10(np.maximum(mag, peak * 1e-12) / peak)
    db = np.maximum(db, -dynamic_range_db)
    return ((db + dynamic_range_db) / dynamic_range_db).astype(np.float32)


def crop_doppler(sp: Spectrogram, height: int) -> Spectrogram:
    """Keep the central ``height`` Doppler rows (zero Doppler stays centred)."""
    H = sp.data.shape[1]
    if height > H:
        raise DataError(f"cannot crop {H} Doppler bins to {height}")
    lo = H // 2 - height // 2
    return Spectrogram(sp.data[:, lo : lo + height], sp.doppler_hz_per_bin, sp.seconds_per_bin, sp.label)


def frequency_to_bin(f_hz: float, fft_len: int, sample_rate: float) -> int:
    """Row index of frequency ``f_hz`` in an fftshift-ed spectrum."""
    return fft_len // 2 + int(round(f_hz * fft_len / sample_rate))


# datasets -------------------------------------------------------------------
@dataclass
class Dataset:
    """A labelled stack of equally shaped spectrograms."""

    X: np.ndarray
    y: np.ndarray
    class_names: list[str]
    doppler_hz_per_bin: float = 1.0
    seconds_per_bin: float = 1.0
    ids: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float32)
        self.y = np.asarray(self.y, dtype=np.int64)
        if len(self.X) != len(self.y):
            raise DataError(f"{len(self.X)} samples but {len(self.y)} labels")
        if not self.ids:
            self.ids = [f"{i:05d}" for i in range(len(self.y))]

    def __len__(self) -> int:
        return len(self.y)

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.y, minlength=self.n_classes)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.X[idx], self.y[idx], list(self.class_names), self.doppler_hz_per_bin, self.seconds_per_bin, [self.ids[i] for i in idx])

    def spectrograms(self) -> Iterator[Spectrogram]:
        for x, label in zip(self.X, self.y):
            yield Spectrogram(x, self.doppler_hz_per_bin, self.seconds_per_bin, int(label))

    def content_hash(self) -> str:
        import hashlib

        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.X).tobytes())
        h.update(np.ascontiguousarray(self.y).tobytes())
        return h.hexdigest()[:16]


def synth_spectrogram(
    cls: SynthClass,
    seed,
    jitter: float = 0.15,
    time_bins: int = DEFAULT_TIME_BINS,
    doppler_bins: int = DEFAULT_DOPPLER_BINS,
    fft_len: int = DEFAULT_FFT_LEN,
    hop: int = DEFAULT_HOP,
    sample_rate: float = DEFAULT_SAMPLE_RATE,
) -> Spectrogram:
    """One randomised sample of ``cls`` as a (1, doppler_bins, time_bins) spectrogram."""
    rng = np.random.default_rng(seed)
    scale = lambda: 1.0 + rng.uniform(-jitter, jitter)  # noqa: E731
    varied = SynthClass(
        cls.name,
        bulk_velocity_hz=cls.bulk_velocity_hz * scale(),
        limb_amp_hz=cls.limb_amp_hz * scale(),
        limb_rate_hz=cls.limb_rate_hz * scale(),
        noise_db=cls.noise_db,
        torso_gain=cls.torso_gain,
        chirp_hz_per_s=cls.chirp_hz_per_s * scale(),
        chirp_duration_s=cls.chirp_duration_s,
    )
    n = fft_len + (time_bins - 1) * hop
    sig = synth_signal(varied, n / sample_rate, sample_rate, rng, n_samples=n)
    sp = stft(sig, fft_len=fft_len, hop=hop, sample_rate=sample_rate)
    return crop_doppler(sp, doppler_bins)


def stratified_split(y: np.ndarray, split_ratio: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-class shuffled split; each class contributes ``round(ratio * n_c)`` training samples."""
    if not 0.0 < split_ratio <= 1.0:
        raise DataError(f"split_ratio must be in (0, 1], got {split_ratio}")
    rng = np.random.default_rng(seed)
    train, test = [], []
    for c in np.unique(y):
        idx = np.flatnonzero(y == c)
        idx = idx[rng.permutation(len(idx))]
        k = int(round(split_ratio * len(idx)))
        train.extend(idx[:k].tolist())
        test.extend(idx[k:].tolist())
    return np.sort(np.asarray(train, dtype=np.int64)), np.sort(np.asarray(test, dtype=np.int64))


def make_dataset(
    classes: Sequence[SynthClass] = DEFAULT_CLASSES,
    n_per_class: int = 60,
    split_ratio: float = 0.8,
    seed: int = 0,
    **synth_kwargs,
) -> tuple[Dataset, Dataset]:
    """Synthesize ``n_per_class`` samples per class and split them stratified."""
    classes = list(classes)
    if not classes:
        raise DataError("class list is empty")
    if n_per_class < 2:
        raise DataError(f"n_per_class must be >= 2, got {n_per_class}")
    root = np.random.SeedSequence(seed)
    children = root.spawn(len(classes))
    X, y, ids = [], [], []
    for ci, (cls, ss) in enumerate(zip(classes, children)):
        for k, sample_ss in enumerate(ss.spawn(n_per_class)):
            sp = synth_spectrogram(cls, sample_ss, **synth_kwargs)
            X.append(sp.data)
            y.append(ci)
            ids.append(f"{cls.name}/{k:04d}")
    full = Dataset(np.stack(X), np.asarray(y), [c.name for c in classes], sp.doppler_hz_per_bin, sp.seconds_per_bin, ids)
    tr, te = stratified_split(full.y, split_ratio, seed)
    if len(te) == 0:
        warnings.warn("split_ratio leaves the test set empty", stacklevel=2)
    return full.subset(tr), full.subset(te)


def synth_sequence(
    classes: Sequence[SynthClass],
    order: Sequence[int],
    bins_per_segment: int,
    seed: int = 0,
    **synth_kwargs,
) -> Spectrogram:
    """Concatenate activity segments into one continuous spectrogram with per-bin labels."""
    ss = np.random.SeedSequence(seed).spawn(len(order))
    parts, labels = [], []
    for ci, s in zip(order, ss):
        sp = synth_spectrogram(classes[ci], s, time_bins=bins_per_segment, **synth_kwargs)
        parts.append(sp.data)
        labels.extend([ci] * bins_per_segment)
    return Spectrogram(np.concatenate(parts, axis=2), sp.doppler_hz_per_bin, sp.seconds_per_bin, np.asarray(labels))


# windowing ------------------------------------------------------------------
def majority_label(labels: np.ndarray) -> int:
    """Most frequent label; ties go to the larger class index."""
    counts = np.bincount(np.asarray(labels, dtype=np.int64))
    return int(np.flatnonzero(counts == counts.max())[-1])


def window_count(W: int, spec: WindowSpec) -> int:
    if W < spec.frame_len:
        raise DataError(f"sequence of {W} time bins is shorter than the frame length {spec.frame_len}")
    return (W - spec.frame_len) // spec.stride + 1


def sliding_windows(sp: Spectrogram, spec: WindowSpec) -> list[tuple[np.ndarray, int | None]]:
    """Cut a continuous spectrogram into (frame, majority label) pairs."""
    W = sp.data.shape[2]
    n = window_count(W, spec)
    out = []
    for k in range(n):
        lo = k * spec.stride
        frame = sp.data[:, :, lo : lo + spec.frame_len]
        label = majority_label(sp.label[lo : lo + spec.frame_len]) if sp.continuous else sp.label
        out.append((frame, label))
    return out


# file IO ----------------------------------------------------------------------
def load_spectrogram(path: str | os.PathLike, expected_shape: Sequence[int] | None = None) -> Spectrogram:
    """Read a ``.rmt`` tensor file or an 8-bit grayscale/RGB PNG as a spectrogram."""
    path = Path(path)
    try:
        if path.suffix.lower() == ".png":
            from PIL import Image

            with Image.open(path) as im:
                im.load()
                if im.mode in ("L", "P", "I;16"):
                    arr = np.asarray(im.convert("L"), dtype=np.float32)[None] / 255.0
                elif im.mode in ("RGB", "RGBA"):
                    arr = np.asarray(im.convert("RGB"), dtype=np.float32).transpose(2, 0, 1) / 255.0
                else:
                    raise DataError(f"{path}: unsupported PNG mode {im.mode}")
        else:
            arr = load_tensor(path).data
            if arr.ndim == 2:
                arr = arr[None]
    except (OSError, FormatError, SyntaxError, ValueError) as exc:
        if isinstance(exc, DataError):
            raise
        raise DataError(f"cannot read spectrogram {path}: {exc}") from exc
    if expected_shape is not None and tuple(arr.shape) != tuple(expected_shape):
        raise DataError(f"{path}: shape {tuple(arr.shape)} does not match expected input shape {tuple(expected_shape)}")
    return Spectrogram(np.clip(arr, 0.0, 1.0))


def save_spectrogram(sp: Spectrogram | np.ndarray, path: str | os.PathLike) -> None:
    data = sp.data if isinstance(sp, Spectrogram) else np.asarray(sp)
    path = Path(path)
    if path.suffix.lower() == ".png":
        from PIL import Image

        img = np.round(np.clip(data, 0, 1) * 255).astype(np.uint8)
        mode_img = Image.fromarray(img[0], "L") if img.shape[0] == 1 else Image.fromarray(img.transpose(1, 2, 0), "RGB")
        mode_img.save(path)
    else:
        save_tensor(np.asarray(data, dtype=np.float32), path)


def write_dataset(root: str | os.PathLike, train: Dataset, test: Dataset, seed: int | None = None, fmt: str = "rmt", extra: dict | None = None) -> Path:
    """Write ``<root>/<class>/<sample_id>.<fmt>`` plus a ``dataset.json`` manifest recording the split."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    names = train.class_names
    for name in names:
        (root / name).mkdir(exist_ok=True)
    split: dict[str, list[str]] = {"train": [], "test": []}
    for part, ds in (("train", train), ("test", test)):
        for x, label, sid in zip(ds.X, ds.y, ds.ids):
            stem = sid.split("/")[-1]
            rel = f"{names[label]}/{stem}.{fmt}"
            save_spectrogram(x, root / rel)
            split[part].append(rel)
    manifest = {
        "classes": names,
        "doppler_hz_per_bin": train.doppler_hz_per_bin,
        "seconds_per_bin": train.seconds_per_bin,
        "seed": seed,
        "input_shape": list(train.X.shape[1:]),
        "split": split,
    }
    if extra:
        manifest.update(extra)
    (root / "dataset.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return root


def read_dataset(root: str | os.PathLike, split_ratio: float = 0.8, seed: int = 0, expected_shape=None) -> tuple[Dataset, Dataset]:
    """Load a dataset directory; uses the manifest split when present."""
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset directory {root} does not exist")
    manifest_path = root / "dataset.json"
    manifest = json.loads(manifest_path.read_text()) if manifest_path.exists() else {}
    names = manifest.get("classes") or sorted(p.name for p in root.iterdir() if p.is_dir())
    if not names:
        raise DataError(f"{root}: no class directories found")

    def load_many(rels):
        X, y = [], []
        for rel in rels:
            X.append(load_spectrogram(root / rel, expected_shape).data)
            y.append(names.index(rel.split("/")[0]))
        return X, y

    meta = (manifest.get("doppler_hz_per_bin", 1.0), manifest.get("seconds_per_bin", 1.0))
    if "split" in manifest:
        out = []
        for part in ("train", "test"):
            rels = manifest["split"][part]
            X, y = load_many(rels)
            shape = tuple(manifest.get("input_shape", X[0].shape if X else (1, 1, 1)))
            out.append(Dataset(np.stack(X) if X else np.zeros((0,) + shape), y, list(names), *meta, ids=list(rels)))
        return out[0], out[1]
    rels = [f"{n}/{p.name}" for n in names for p in sorted((root / n).iterdir()) if p.suffix.lower() in (".rmt", ".png")]
    X, y = load_many(rels)
    full = Dataset(np.stack(X), y, list(names), *meta, ids=rels)
    tr, te = stratified_split(full.y, split_ratio, seed)
    return full.subset(tr), full.subset(te)


def write_sequence(sp: Spectrogram, path: str | os.PathLike, labels_path: str | os.PathLike | None = None) -> None:
    """Continuous recording: one tensor file plus a ``labels.csv`` sidecar (time_bin,label)."""
    path = Path(path)
    save_spectrogram(sp, path)
    labels_path = Path(labels_path) if labels_path else path.with_name("labels.csv")
    with open(labels_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["time_bin", "label"])
        for i, lab in enumerate(sp.label):
            w.writerow([i, int(lab)])


def read_sequence(path: str | os.PathLike, labels_path: str | os.PathLike | None = None) -> Spectrogram:
    path = Path(path)
    sp = load_spectrogram(path)
    labels_path = Path(labels_path) if labels_path else path.with_name("labels.csv")
    if not labels_path.exists():
        raise DataError(f"missing label sidecar {labels_path}")
    labels = {}
    with open(labels_path, newline="") as fh:
        for row in csv.DictReader(fh):
            labels[int(row["time_bin"])] = int(row["label"])
    W = sp.data.shape[2]
    if sorted(labels) != list(range(W)):
        raise DataError(f"{labels_path}: expected labels for time bins 0..{W - 1}")
    sp.label = np.asarray([labels[i] for i in range(W)], dtype=np.int64)
    return sp


def synth_class_to_dict(c: SynthClass) -> dict:
    return asdict(c)
