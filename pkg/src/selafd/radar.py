"""Continuous-wave radar data path: STFT to Time-Doppler maps, a synthetic
micro-Doppler generator for the six activities, recording files, dataset
ingestion and stratified splitting, and TD-map rasterization.

Doppler convention: complex baseband, full FFT per frame, fft-shifted so
row index ascends from the most negative to the most positive Doppler bin
with zero Doppler at row fft_len//2.
"""

from __future__ import annotations

import dataclasses
import hashlib
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, InputError

logger = logging.getLogger(__name__)

LABELS = ("walking", "sitting", "standing", "drinking", "picking_up", "falling")
FALL_CLASS = LABELS.index("falling")

LOG_EPS = 1e-12          # inside the dB log, avoids -inf
DEFAULT_DYNAMIC_RANGE = 60.0
UOG_EXPECTED_COUNT = 1753


def label_index(label: str) -> int:
    try:
        return LABELS.index(label)
    except ValueError:
        raise InputError(f"unknown activity label {label!r}; "
                         f"expected one of {', '.join(LABELS)}") from None


@dataclass(frozen=True)
class CwRecording:
    """One CW radar baseband recording: complex I/Q samples plus label."""
    samples: np.ndarray          # complex128, 1-D
    sample_rate: float
    label: str
    source_id: str = ""

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise InputError(f"sample_rate must be positive, got {self.sample_rate}")


@dataclass(frozen=True)
class StftParams:
    window_len: int
    hop: int
    fft_len: int
    window_fn: str = "hann"

    def __post_init__(self):
        if not (0 < self.hop <= self.window_len <= self.fft_len):
            raise ConfigurationError(
                f"need 0 < hop <= window_len <= fft_len, got hop={self.hop}, "
                f"window_len={self.window_len}, fft_len={self.fft_len}")
        if self.window_fn != "hann":
            raise ConfigurationError(f"unsupported window {self.window_fn!r}")

    @classmethod
    def defaults(cls, sample_rate: float, window_s: float = 0.2,
                 overlap: float = 0.95) -> "StftParams":
        """Standard micro-Doppler settings: 0.2 s Hann, 95% overlap,
        fft length the next power of two."""
        window = max(int(round(window_s * sample_rate)), 2)
        hop = max(int(round(window * (1.0 - overlap))), 1)
        fft_len = 1 << (window - 1).bit_length()
        return cls(window_len=window, hop=hop, fft_len=fft_len)

    def frame_count(self, n_samples: int) -> int:
        return (n_samples - self.window_len) // self.hop + 1

    def to_meta(self) -> dict[str, str]:
        return {f"stft.{k}": str(v) for k, v in dataclasses.asdict(self).items()}


@dataclass(frozen=True)
class SpectrogramSample:
    """dB-magnitude Time-Doppler map plus provenance."""
    td: np.ndarray               # (freq_bins, time_bins) float64, finite
    label: str
    sample_rate: float
    params: StftParams
    doppler_axis: np.ndarray     # Hz per row, ascending, 0 at fft_len//2
    time_axis: np.ndarray        # seconds per column (frame centers)
    source_id: str = ""


def hann_window(n: int) -> np.ndarray:
    """Periodic Hann: a bin-centered tone occupies exactly three DFT bins."""
    return 0.5 * (1.0 - np.cos(2.0 * np.pi * np.arange(n) / n))


def stft_complex(rec: CwRecording, p: StftParams) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Windowed hopped DFT: (frames [freq x time], doppler_axis, time_axis)."""
    n = len(rec.samples)
    if n < p.window_len:
        raise InputError(
            f"recording of {n} samples shorter than one window ({p.window_len})")
    frames = p.frame_count(n)
    w = hann_window(p.window_len)
    starts = np.arange(frames) * p.hop
    seg = np.stack([rec.samples[s:s + p.window_len] for s in starts])
    spec = np.fft.fft(seg * w, n=p.fft_len, axis=1)
    spec = np.fft.fftshift(spec, axes=1).T           # (freq, time)
    doppler = np.fft.fftshift(np.fft.fftfreq(p.fft_len, d=1.0 / rec.sample_rate))
    times = (starts + p.window_len / 2.0) / rec.sample_rate
    return spec, doppler, times


def stft(rec: CwRecording, p: StftParams,
         dynamic_range_db: float = DEFAULT_DYNAMIC_RANGE) -> SpectrogramSample:
    """dB-magnitude TD map, clipped to `dynamic_range_db` below the map peak."""
    spec, doppler, times = stft_complex(rec, p)
    db = 20.0 * np.log10(np.abs(spec) + LOG_EPS)
    db = np.clip(db, db.max() - dynamic_range_db, None)
    return SpectrogramSample(td=db, label=rec.label, sample_rate=rec.sample_rate,
                             params=p, doppler_axis=doppler, time_axis=times,
                             source_id=rec.source_id)


# ---------------------------------------------------------------------------
# synthetic activity generator
# ---------------------------------------------------------------------------

def _edge_taper(t: np.ndarray, t0: float, t1: float, edge: float = 0.02) -> np.ndarray:
    """1 inside [t0, t1] with raised-cosine edges, 0 outside."""
    env = np.zeros_like(t)
    inside = (t >= t0) & (t <= t1)
    env[inside] = 1.0
    rise = (t >= t0 - edge) & (t < t0)
    env[rise] = 0.5 * (1.0 - np.cos(np.pi * (t[rise] - (t0 - edge)) / edge))
    fall = (t > t1) & (t <= t1 + edge)
    env[fall] = 0.5 * (1.0 + np.cos(np.pi * (t[fall] - t1) / edge))
    return env


def _smoothstep(u: np.ndarray) -> np.ndarray:
    u = np.clip(u, 0.0, 1.0)
    return u * u * (3.0 - 2.0 * u)


def activity_components(label: str, duration_s: float, sample_rate: float,
                        rng: np.random.Generator) -> list[tuple[np.ndarray, np.ndarray]]:
    """Per-scatterer (amplitude envelope, instantaneous frequency in Hz)
    over the sample grid. The falling template's frequency extremum exceeds
    every other class's by construction.

    Exposed so tests can check the generated TD maps against the generator's
    own frequency laws.
    """
    t = np.arange(int(round(duration_s * sample_rate))) / sample_rate
    u = lambda lo, hi: float(rng.uniform(lo, hi))
    comps: list[tuple[np.ndarray, np.ndarray]] = []

    # static clutter common to all activities
    comps.append((np.full_like(t, 0.25), np.zeros_like(t)))

    if label == "walking":
        gait = u(1.4, 1.8)
        base = u(70.0, 90.0)
        phase = u(0.0, 2.0 * np.pi)
        swing = u(120.0, 145.0)
        osc = np.sin(2.0 * np.pi * gait * t + phase)
        comps.append((np.full_like(t, 1.0), base + 25.0 * osc))
        comps.append((np.full_like(t, 0.35), base + swing * osc))
        comps.append((np.full_like(t, 0.35), base - swing * osc))
    elif label in ("sitting", "standing"):
        sign = -1.0 if label == "sitting" else 1.0
        t0 = u(0.3, 0.6)
        dur = u(0.7, 0.9)
        peak = u(80.0, 100.0)
        freq = sign * peak * _smoothstep((t - t0) / dur)
        comps.append((_edge_taper(t, t0, t0 + dur), freq))
    elif label == "drinking":
        t0 = u(0.5, 0.9)
        dur = u(0.4, 0.55)
        peak = u(14.0, 20.0)
        freq = peak * np.sin(np.pi * np.clip((t - t0) / dur, 0.0, 1.0))
        comps.append((0.8 * _edge_taper(t, t0, t0 + dur), freq))
    elif label == "picking_up":
        t0 = u(0.4, 0.8)
        dur = u(0.6, 0.8)
        peak = u(16.0, 24.0)
        freq = -peak * np.sin(2.0 * np.pi * np.clip((t - t0) / dur, 0.0, 1.0))
        comps.append((0.8 * _edge_taper(t, t0, t0 + dur), freq))
    elif label == "falling":
        t0 = u(0.5, 0.8)
        dur = u(0.3, 0.38)
        peak = u(320.0, 350.0)
        freq = -peak * _smoothstep((t - t0) / dur)
        comps.append((1.2 * _edge_taper(t, t0, t0 + dur), freq))
    else:
        raise InputError(f"unknown activity label {label!r}; "
                         f"expected one of {', '.join(LABELS)}")
    return comps


def synth_activity(label: str, duration_s: float = 2.0,
                   sample_rate: float = 1000.0, seed: int = 0,
                   snr_db: float = 10.0, source_id: str = "") -> CwRecording:
    """Sum of body-part scatterer returns with label-specific Doppler laws,
    plus complex Gaussian noise at the requested SNR. Deterministic in
    (label, duration, sample_rate, seed, snr_db)."""
    rng = np.random.default_rng(np.random.PCG64(seed))
    comps = activity_components(label, duration_s, sample_rate, rng)
    n = len(comps[0][0])
    clean = np.zeros(n, dtype=np.complex128)
    for amp, freq in comps:
        phase = 2.0 * np.pi * np.cumsum(freq) / sample_rate
        clean += amp * np.exp(1j * phase)
    power = float(np.mean(np.abs(clean) ** 2))
    sigma = np.sqrt(power / (10.0 ** (snr_db / 10.0)) / 2.0)
    noise = sigma * (rng.standard_normal(n) + 1j * rng.standard_normal(n))
    return CwRecording(samples=clean + noise, sample_rate=sample_rate,
                       label=label, source_id=source_id)


def sample_seed(master_seed: int, class_index: int, index: int) -> int:
    """Stable per-sample seed derived from the corpus master seed."""
    ss = np.random.SeedSequence(entropy=(master_seed, class_index, index))
    return int(ss.generate_state(1)[0])


# ---------------------------------------------------------------------------
# rasterization
# ---------------------------------------------------------------------------

def bilinear_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Align-corners bilinear resize of a 2-D map.

    Uses the lerp form a + (b-a)*w, which is exact at corners and keeps a
    constant map exactly constant (weight-sum roundoff would otherwise leak
    into the min-max normalization downstream).
    """
    in_h, in_w = img.shape
    ys = (np.linspace(0.0, in_h - 1.0, out_h) if out_h > 1
          else np.zeros(1))
    xs = (np.linspace(0.0, in_w - 1.0, out_w) if out_w > 1
          else np.zeros(1))
    y0 = np.clip(np.floor(ys).astype(int), 0, in_h - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, in_w - 1)
    y1 = np.minimum(y0 + 1, in_h - 1)
    x1 = np.minimum(x0 + 1, in_w - 1)
    wy = (ys - y0)[:, None]
    wx = (xs - x0)[None, :]
    a = img[np.ix_(y0, x0)]
    b = img[np.ix_(y0, x1)]
    c = img[np.ix_(y1, x0)]
    d = img[np.ix_(y1, x1)]
    top = a + (b - a) * wx
    bot = c + (d - c) * wx
    return top + (bot - top) * wy


def rasterize(sp: SpectrogramSample, out_size: int, channels: int = 1,
              mean: float = 0.0, std: float = 1.0,
              normalize: bool = True) -> np.ndarray:
    """TD map -> (channels, out, out) model input.

    Bilinear resize, min-max to [0,1] (a constant map maps to zeros, never
    NaN), channel replication, then (x - mean) / std. The default mean/std
    leave the min-maxed values untouched. With normalize=False the resized
    dB map is returned unscaled on every channel.
    """
    resized = bilinear_resize(sp.td, out_size, out_size)
    if normalize:
        lo, hi = float(resized.min()), float(resized.max())
        resized = np.zeros_like(resized) if hi <= lo else (resized - lo) / (hi - lo)
        resized = (resized - mean) / std
    return np.broadcast_to(resized, (channels,) + resized.shape).copy()


# ---------------------------------------------------------------------------
# recording files and corpus manifest
# ---------------------------------------------------------------------------

def save_recording(path, rec: CwRecording) -> None:
    """Text header (sample_rate, label, length) + interleaved I/Q float64 LE."""
    iq = np.empty(2 * len(rec.samples))
    iq[0::2] = rec.samples.real
    iq[1::2] = rec.samples.imag
    with open(path, "wb") as f:
        f.write(f"sample_rate {rec.sample_rate!r}\n".encode("ascii"))
        f.write(f"label {rec.label}\n".encode("ascii"))
        f.write(f"length {len(rec.samples)}\n".encode("ascii"))
        f.write(f"source_id {rec.source_id}\n".encode("ascii"))
        f.write(b"data\n")
        f.write(iq.astype("<f8").tobytes())


def load_recording(path) -> CwRecording:
    blob = Path(path).read_bytes()
    try:
        head_end = blob.index(b"data\n")
    except ValueError:
        raise InputError(f"{path}: missing data marker") from None
    fields: dict[str, str] = {}
    for line in blob[:head_end].decode("ascii").splitlines():
        key, _, value = line.partition(" ")
        fields[key] = value
    try:
        n = int(fields["length"])
        rate = float(fields["sample_rate"])
        label = fields["label"]
    except (KeyError, ValueError) as e:
        raise InputError(f"{path}: malformed header ({e})") from None
    raw = blob[head_end + len(b"data\n"):]
    if len(raw) != 16 * n:
        raise InputError(f"{path}: payload is {len(raw)} bytes, expected {16 * n}")
    iq = np.frombuffer(raw, dtype="<f8")
    return CwRecording(samples=iq[0::2] + 1j * iq[1::2], sample_rate=rate,
                       label=label, source_id=fields.get("source_id", ""))


@dataclass(frozen=True)
class CorpusEntry:
    sample_id: str
    label: str
    path: str
    seed: int


def write_corpus_manifest(path, entries: list[CorpusEntry]) -> None:
    with open(path, "w", encoding="ascii") as f:
        f.write("# id label path seed\n")
        for e in entries:
            f.write(f"{e.sample_id} {e.label} {e.path} {e.seed}\n")


def read_corpus_manifest(path) -> list[CorpusEntry]:
    entries = []
    for line in Path(path).read_text(encoding="ascii").splitlines():
        if not line or line.startswith("#"):
            continue
        sid, label, rel, seed = line.split(" ")
        entries.append(CorpusEntry(sid, label, rel, int(seed)))
    return entries


def synth_corpus(out_dir, per_class: int, seed: int = 0, snr_db: float = 10.0,
                 duration_s: float = 2.0, sample_rate: float = 1000.0) -> list[CorpusEntry]:
    """Balanced recordings for all six labels + a manifest listing each file."""
    if per_class < 1:
        raise InputError(f"per_class must be >= 1, got {per_class}")
    out = Path(out_dir)
    (out / "recordings").mkdir(parents=True, exist_ok=True)
    entries: list[CorpusEntry] = []
    for ci, label in enumerate(LABELS):
        for i in range(per_class):
            sid = f"{label}_{i:04d}"
            s = sample_seed(seed, ci, i)
            rec = synth_activity(label, duration_s, sample_rate, seed=s,
                                 snr_db=snr_db, source_id=sid)
            rel = f"recordings/{sid}.cwrec"
            save_recording(out / rel, rec)
            entries.append(CorpusEntry(sid, label, rel, s))
    write_corpus_manifest(out / "manifest.txt", entries)
    return entries


def load_corpus(corpus_dir) -> list[CwRecording]:
    """Recordings in manifest order."""
    root = Path(corpus_dir)
    entries = read_corpus_manifest(root / "manifest.txt")
    return [load_recording(root / e.path) for e in entries]


# ---------------------------------------------------------------------------
# external-dataset ingestion
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class IngestConfig:
    """Field mapping for raw recordings whose layout the source never
    documents; everything is explicit here instead of guessed."""
    format: str = "cwrec"                 # "cwrec" | "text_iq"
    pattern: str = "*"
    sample_rate: float | None = None      # required for text_iq
    header_lines: int = 0                 # skipped for text_iq
    label_map: dict[str, str] = field(default_factory=dict)  # filename prefix -> label
    expected_count: int | None = None     # soft check, warn on mismatch


def _label_from_name(name: str, label_map: dict[str, str]) -> str:
    for prefix in sorted(label_map, key=len, reverse=True):
        if name.startswith(prefix):
            return label_map[prefix]
    raise InputError(f"no label mapping matches file name {name!r}")


def ingest_uog(path, cfg: IngestConfig) -> tuple[list[CwRecording], list[dict]]:
    """Best-effort directory ingestion. Malformed files never abort the run;
    they land in the returned skip manifest as (path, reason) entries."""
    root = Path(path)
    recordings: list[CwRecording] = []
    skips: list[dict] = []
    for f in sorted(root.glob(cfg.pattern)):
        if not f.is_file():
            continue
        try:
            if cfg.format == "cwrec":
                rec = load_recording(f)
                rec = dataclasses.replace(rec, source_id=rec.source_id or f.stem)
            elif cfg.format == "text_iq":
                if cfg.sample_rate is None:
                    raise InputError("text_iq ingestion needs a sample_rate")
                lines = f.read_text().splitlines()[cfg.header_lines:]
                vals = np.array([float(v) for line in lines for v in line.split()])
                if vals.size < 2 or vals.size % 2:
                    raise InputError(f"expected interleaved I/Q, got {vals.size} values")
                rec = CwRecording(samples=vals[0::2] + 1j * vals[1::2],
                                  sample_rate=cfg.sample_rate,
                                  label=_label_from_name(f.name, cfg.label_map),
                                  source_id=f.stem)
            else:
                raise InputError(f"unknown ingest format {cfg.format!r}")
            label_index(rec.label)
            recordings.append(rec)
        except Exception as e:                      # per-file isolation
            skips.append({"path": str(f), "reason": str(e)})
    if cfg.expected_count is not None and recordings and \
            len(recordings) != cfg.expected_count:
        logger.warning("ingested %d recordings, expected %d",
                       len(recordings), cfg.expected_count)
    return recordings, skips


# ---------------------------------------------------------------------------
# model-ready samples
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DataSample:
    """One model input: rasterized TD image + class index + provenance."""
    image: np.ndarray            # (channels, H, W) float64
    label_index: int
    sample_id: str


def prepare_dataset(recordings: list[CwRecording], params: StftParams,
                    image_size: int, channels: int = 1,
                    mean: float = 0.0, std: float = 1.0,
                    dynamic_range_db: float = DEFAULT_DYNAMIC_RANGE) -> list[DataSample]:
    """STFT + rasterize every recording, preserving order."""
    out = []
    for rec in recordings:
        sp = stft(rec, params, dynamic_range_db)
        img = rasterize(sp, image_size, channels, mean, std)
        out.append(DataSample(image=img, label_index=label_index(rec.label),
                              sample_id=rec.source_id))
    return out


# ---------------------------------------------------------------------------
# dataset splitting
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DatasetSplit:
    train_idx: tuple[int, ...]
    test_idx: tuple[int, ...]
    seed: int
    stratified: bool = True

    def hash(self) -> str:
        text = ("train:" + ",".join(map(str, self.train_idx))
                + ";test:" + ",".join(map(str, self.test_idx)))
        return hashlib.sha256(text.encode("ascii")).hexdigest()


def split(labels: list[str], ratio: float, seed: int) -> DatasetSplit:
    """Stratified, seeded, reproducible train/test index split."""
    if not 0.0 < ratio < 1.0:
        raise InputError(f"split ratio must be in (0,1), got {ratio}")
    rng = np.random.default_rng(np.random.PCG64(seed))
    by_class: dict[str, list[int]] = {}
    for i, lab in enumerate(labels):
        by_class.setdefault(lab, []).append(i)
    train: list[int] = []
    test: list[int] = []
    for lab in sorted(by_class):
        idx = by_class[lab]
        if len(idx) < 2:
            raise InputError(
                f"class {lab!r} has {len(idx)} sample(s); stratification needs >= 2")
        perm = rng.permutation(len(idx))
        n_train = min(max(int(round(ratio * len(idx))), 1), len(idx) - 1)
        train.extend(idx[p] for p in perm[:n_train])
        test.extend(idx[p] for p in perm[n_train:])
    return DatasetSplit(train_idx=tuple(sorted(train)),
                        test_idx=tuple(sorted(test)), seed=seed)
