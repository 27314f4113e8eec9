"""Synthetic insole-pressure / ground-reaction-force walking sessions.

Generates subject-conditioned paired sessions (16x8 pressure videos plus
per-foot force traces), runs the preprocessing chain (edge-fraction masking,
zero-lag low-pass filtering, resampling, normalization), and windows the
result into disjoint training samples with leave-one-subject-out splits.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.signal import butter, filtfilt

logger = logging.getLogger(__name__)

GRAVITY = 9.80665  # m/s^2
INSOLE_MAX_PSI = 30.0
GRID_ROWS, GRID_COLS = 16, 8
SPEED_LEVELS = (0.88, 1.00, 1.25, 1.50)  # m/s: slow, regular, brisk, fast
DEFAULT_RATE_HZ = 200.0
WARMUP_SECONDS = 10.0  # subjects settle into the belt speed; excluded from analysis
GRF_CUTOFF_HZ = 10.0

# One full-length recording keeps this many usable samples after the warm-up
# trim, i.e. exactly 559 disjoint windows of 100 (279 of 200) per session.
FULL_SESSION_SAMPLES = 55_900

# Pressure of the blob center at one body weight, in psi. Leaves headroom
# below the 30 psi sensor ceiling at peak loading (~1.2 BW).
_PRESSURE_GAIN_PSI = 18.0
_BLOB_SIGMA_CELLS = 1.2

# Four permanently dead elements per foot (partial-sensor coverage).
_DEAD_CELLS = ((2, 6), (5, 1), (8, 6), (11, 1))


@dataclass(frozen=True)
class SubjectProfile:
    """Deterministic per-subject gait parameters."""

    subject_id: int
    body_weight: float  # kg, in [45, 95]
    cadence_base: float  # steps/s at 1.0 m/s
    asymmetry: float  # right/left imbalance, unitless in [-0.2, 0.2]
    noise_level: float  # sensor noise as a fraction of full scale, >= 0
    drift_rate: float  # multiplicative gain drift per minute, >= 0
    rng_seed: int


@dataclass
class RawSession:
    """One treadmill session before any preprocessing."""

    grf: np.ndarray  # (2, n) Newtons, [left, right]
    insole: np.ndarray  # (2, n, 16, 8) psi in [0, 30]
    rate_hz: float
    speed: float  # m/s
    profile: SubjectProfile


@dataclass(frozen=True)
class FractionMask:
    """Effective pixel coverage of the insole outline on the 16x8 grid."""

    grid: np.ndarray  # values in {0, 0.33, 0.67, 1}


@dataclass(frozen=True)
class ScalingInfo:
    """Constants needed to invert the [0, 1] normalization."""

    grf_fraction_max: float  # dataset-wide max GRF as a fraction of body weight
    insole_max_psi: float = INSOLE_MAX_PSI
    gravity: float = GRAVITY


@dataclass
class NormalizedSession:
    """A session after filtering and [0, 1] normalization."""

    grf: np.ndarray  # (2, n) in [0, 1]
    insole: np.ndarray  # (2, n, 16, 8) in [0, 1]
    rate_hz: float
    speed: float
    subject_id: int
    scaling: ScalingInfo


@dataclass
class WindowedDataset:
    """Disjoint windowed samples over all subjects and speeds."""

    insole: np.ndarray  # (n, 2, window, 16, 8) float32 in [0, 1]
    grf: np.ndarray  # (n, 2, window) float32 in [0, 1]
    subject_ids: np.ndarray  # (n,) int64
    speeds: np.ndarray  # (n,) float32
    window: int
    scaling: ScalingInfo
    body_weights: dict[int, float] = field(default_factory=dict)

    def __len__(self) -> int:
        return int(self.insole.shape[0])

    @property
    def subjects(self) -> list[int]:
        return sorted(int(s) for s in np.unique(self.subject_ids))

    def subset(self, mask: np.ndarray) -> "WindowedDataset":
        return WindowedDataset(
            insole=self.insole[mask],
            grf=self.grf[mask],
            subject_ids=self.subject_ids[mask],
            speeds=self.speeds[mask],
            window=self.window,
            scaling=self.scaling,
            body_weights=dict(self.body_weights),
        )

    # --- on-disk format: manifest.json + one raw little-endian f32 file per tensor ---

    def save(self, out_dir: str | Path, split: str = "all") -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        insole32 = np.ascontiguousarray(self.insole, dtype="<f4")
        grf32 = np.ascontiguousarray(self.grf, dtype="<f4")
        (out / f"{split}_insole.f32").write_bytes(insole32.tobytes())
        (out / f"{split}_grf.f32").write_bytes(grf32.tobytes())
        manifest = {
            "format": "f32le",
            "window": int(self.window),
            "channels": 2,
            "grid": [GRID_ROWS, GRID_COLS],
            "scaling": {
                "grf_fraction_max": self.scaling.grf_fraction_max,
                "insole_max_psi": self.scaling.insole_max_psi,
                "gravity": self.scaling.gravity,
            },
            "body_weights": {str(k): v for k, v in sorted(self.body_weights.items())},
            "splits": {
                split: {
                    "n": len(self),
                    "insole_file": f"{split}_insole.f32",
                    "insole_shape": list(insole32.shape),
                    "grf_file": f"{split}_grf.f32",
                    "grf_shape": list(grf32.shape),
                    "subject_ids": [int(s) for s in self.subject_ids],
                    "speeds": [float(s) for s in self.speeds],
                }
            },
        }
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
        return out

    @classmethod
    def load(cls, in_dir: str | Path, split: str = "all") -> "WindowedDataset":
        root = Path(in_dir)
        manifest = json.loads((root / "manifest.json").read_text())
        if manifest.get("format") != "f32le":
            raise ValueError(f"unsupported dataset format: {manifest.get('format')}")
        spec = manifest["splits"][split]
        insole = np.frombuffer(
            (root / spec["insole_file"]).read_bytes(), dtype="<f4"
        ).reshape(spec["insole_shape"])
        grf = np.frombuffer((root / spec["grf_file"]).read_bytes(), dtype="<f4").reshape(
            spec["grf_shape"]
        )
        scaling = ScalingInfo(
            grf_fraction_max=manifest["scaling"]["grf_fraction_max"],
            insole_max_psi=manifest["scaling"]["insole_max_psi"],
            gravity=manifest["scaling"]["gravity"],
        )
        return cls(
            insole=insole.copy(),
            grf=grf.copy(),
            subject_ids=np.asarray(spec["subject_ids"], dtype=np.int64),
            speeds=np.asarray(spec["speeds"], dtype=np.float32),
            window=int(manifest["window"]),
            scaling=scaling,
            body_weights={int(k): v for k, v in manifest.get("body_weights", {}).items()},
        )


def make_profile(seed: int, subject_id: int) -> SubjectProfile:
    """Draw a deterministic subject profile from (seed, subject_id)."""
    if subject_id < 0:
        raise ValueError("subject_id must be >= 0")
    rng = np.random.default_rng([int(seed) % (2**63), int(subject_id)])
    body_weight = float(np.clip(rng.normal(64.0, 6.0), 45.0, 95.0))
    cadence_base = float(rng.uniform(1.55, 1.95))
    asymmetry = float(rng.uniform(-0.12, 0.12))
    noise_level = float(rng.uniform(0.008, 0.025))
    drift_rate = float(rng.uniform(0.0, 0.02))
    rng_seed = int(rng.integers(2**31 - 1))
    return SubjectProfile(
        subject_id=int(subject_id),
        body_weight=body_weight,
        cadence_base=cadence_base,
        asymmetry=asymmetry,
        noise_level=noise_level,
        drift_rate=drift_rate,
        rng_seed=rng_seed,
    )


def _hump(u: np.ndarray, center: float, width: float) -> np.ndarray:
    d = np.abs(u - center)
    return np.where(d < width, 0.5 * (1.0 + np.cos(np.pi * d / width)), 0.0)


def _stance_template(s: np.ndarray) -> np.ndarray:
    """Double-hump loading curve over normalized stance time s in [0, 1]."""
    return _hump(s, 0.25, 0.25) + _hump(s, 0.75, 0.25) + 0.75 * _hump(s, 0.5, 0.30)


# Peak of the raw template, used to make the configured peak exact.
_TEMPLATE_PEAK = float(np.max(_stance_template(np.linspace(0.0, 1.0, 20001))))


def _stance_wave(phase: np.ndarray, stance_frac: float) -> np.ndarray:
    s = phase / stance_frac
    wave = np.where(phase < stance_frac, _stance_template(np.clip(s, 0.0, 1.0)), 0.0)
    return wave / _TEMPLATE_PEAK


def _render_foot(
    grf_fraction: np.ndarray,
    phase: np.ndarray,
    stance_frac: float,
    shape_mask: np.ndarray,
    drift_gain: np.ndarray,
    rng: np.random.Generator,
    noise_level: float,
) -> np.ndarray:
    """Render pressure frames for one foot: a Gaussian blob travelling heel to toe."""
    s = np.clip(phase / stance_frac, 0.0, 1.0)
    row0 = 13.0 - 10.5 * s  # heel strike near row 13, toe-off near row 2.5
    col0 = 3.5 + 0.6 * np.sin(np.pi * s)
    rows = np.arange(GRID_ROWS, dtype=float).reshape(1, GRID_ROWS, 1)
    cols = np.arange(GRID_COLS, dtype=float).reshape(1, 1, GRID_COLS)
    d2 = (rows - row0[:, None, None]) ** 2 + (cols - col0[:, None, None]) ** 2
    amp = _PRESSURE_GAIN_PSI * grf_fraction
    frames = amp[:, None, None] * np.exp(-d2 / (2.0 * _BLOB_SIGMA_CELLS**2))
    if noise_level > 0:
        frames = frames + rng.normal(0.0, noise_level * INSOLE_MAX_PSI, frames.shape)
    frames *= shape_mask
    for r, c in _DEAD_CELLS:
        frames[:, r, c] = 0.0
    frames *= drift_gain[:, None, None]
    np.clip(frames, 0.0, INSOLE_MAX_PSI, out=frames)
    return frames


def synth_session(
    profile: SubjectProfile,
    speed: float,
    duration_s: float,
    rate_hz: float = DEFAULT_RATE_HZ,
) -> RawSession:
    """Synthesize one treadmill session at the given belt speed.

    Returns paired force traces (Newtons) and pressure videos (psi) sampled at
    ``rate_hz``, with alternating feet, an M-shaped double-hump stance profile
    and a heel-to-toe pressure trajectory.
    """
    if not 0.5 <= speed <= 2.0:
        raise ValueError(f"speed {speed} m/s outside supported range [0.5, 2.0]")
    n = int(round(duration_s * rate_hz))
    cadence = profile.cadence_base * speed**0.5  # steps/s, monotone in speed
    cycle_hz = cadence / 2.0
    if n < rate_hz / cycle_hz:
        raise ValueError("duration shorter than one gait cycle")
    stance_frac = float(np.clip(0.60 * speed**-0.08, 0.50, 0.68))

    rng = np.random.default_rng(
        [profile.rng_seed, int(round(speed * 100)), int(round(rate_hz))]
    )
    t = np.arange(n) / rate_hz
    bw_newton = profile.body_weight * GRAVITY
    peaks = {
        "left": float(np.clip(rng.uniform(1.04, 1.16) * (1 - 0.25 * profile.asymmetry), 1.0, 1.2)),
        "right": float(np.clip(rng.uniform(1.04, 1.16) * (1 + 0.25 * profile.asymmetry), 1.0, 1.2)),
    }
    phase_left = (t * cycle_hz) % 1.0
    phase_right = (t * cycle_hz + 0.5 + 0.05 * profile.asymmetry) % 1.0

    grf = np.empty((2, n))
    grf[0] = bw_newton * peaks["left"] * _stance_wave(phase_left, stance_frac)
    grf[1] = bw_newton * peaks["right"] * _stance_wave(phase_right, stance_frac)

    drift_gain = 1.0 + profile.drift_rate * (t / 60.0)
    shape_mask = (fraction_mask().grid > 0).astype(float)
    insole = np.empty((2, n, GRID_ROWS, GRID_COLS))
    insole[0] = _render_foot(
        grf[0] / bw_newton, phase_left, stance_frac, shape_mask, drift_gain, rng,
        profile.noise_level,
    )
    insole[1] = _render_foot(
        grf[1] / bw_newton, phase_right, stance_frac, shape_mask, drift_gain, rng,
        profile.noise_level,
    )

    if profile.noise_level > 0:
        grf = grf + rng.normal(0.0, 0.2 * profile.noise_level * bw_newton, grf.shape)
    np.clip(grf, 0.0, None, out=grf)
    return RawSession(grf=grf, insole=insole, rate_hz=rate_hz, speed=speed, profile=profile)


_FRACTION_GRID = np.array(
    [
        [0.00, 0.33, 0.67, 1.00, 1.00, 0.67, 0.33, 0.00],  # toe tip
        [0.33, 0.67, 1.00, 1.00, 1.00, 1.00, 0.67, 0.33],
        [0.67, 1.00, 1.00, 1.00, 1.00, 1.00, 1.00, 0.67],
        [0.67, 1.00, 1.00, 1.00, 1.00, 1.00, 1.00, 0.67],  # forefoot
        [0.67, 1.00, 1.00, 1.00, 1.00, 1.00, 1.00, 0.67],
        [0.33, 1.00, 1.00, 1.00, 1.00, 1.00, 1.00, 0.33],
        [0.00, 0.67, 1.00, 1.00, 1.00, 1.00, 0.67, 0.00],  # arch
        [0.00, 0.67, 1.00, 1.00, 1.00, 1.00, 0.67, 0.00],
        [0.00, 0.67, 1.00, 1.00, 1.00, 1.00, 0.67, 0.00],
        [0.00, 0.67, 1.00, 1.00, 1.00, 1.00, 0.67, 0.00],
        [0.33, 1.00, 1.00, 1.00, 1.00, 1.00, 1.00, 0.33],  # heel
        [0.67, 1.00, 1.00, 1.00, 1.00, 1.00, 1.00, 0.67],
        [0.67, 1.00, 1.00, 1.00, 1.00, 1.00, 1.00, 0.67],
        [0.33, 1.00, 1.00, 1.00, 1.00, 1.00, 1.00, 0.33],
        [0.00, 0.67, 1.00, 1.00, 1.00, 1.00, 0.67, 0.00],
        [0.00, 0.33, 0.67, 0.67, 0.67, 0.67, 0.33, 0.00],  # heel tip
    ]
)
_FRACTION_GRID.setflags(write=False)


def fraction_mask() -> FractionMask:
    """Effective-coverage mask of the insole outline (0 outside, 1 inside)."""
    return FractionMask(grid=_FRACTION_GRID)


def apply_fraction(frames: np.ndarray, mask: FractionMask) -> np.ndarray:
    """Multiply pressure frames element-wise by the coverage mask."""
    frames = np.asarray(frames)
    if frames.shape[-2:] != (GRID_ROWS, GRID_COLS):
        raise ValueError(f"expected trailing dims {(GRID_ROWS, GRID_COLS)}, got {frames.shape[-2:]}")
    return frames * mask.grid


def zero_lag_lowpass(signal: np.ndarray, cutoff_hz: float, rate_hz: float) -> np.ndarray:
    """Forward-backward second-order Butterworth low-pass along the last axis.

    The two passes cancel the phase response (zero net lag) and square the
    magnitude response; DC gain stays exactly 1. Inputs shorter than the
    internal pad length are reflection-padded with a reduced pad.
    """
    if cutoff_hz >= rate_hz / 2.0:
        raise ValueError(f"cutoff {cutoff_hz} Hz must be below Nyquist ({rate_hz / 2.0} Hz)")
    if cutoff_hz <= 0 or rate_hz <= 0:
        raise ValueError("cutoff and rate must be positive")
    signal = np.asarray(signal, dtype=float)
    b, a = butter(2, cutoff_hz / (rate_hz / 2.0), btype="low")
    padlen = min(9, signal.shape[-1] - 1)
    return filtfilt(b, a, signal, axis=-1, padtype="even", padlen=padlen)


def resample_to(signal: np.ndarray, from_rate: float, to_rate: float) -> np.ndarray:
    """Resample along the last axis; output length is floor(n * to/from)."""
    if from_rate <= 0 or to_rate <= 0:
        raise ValueError("rates must be positive")
    if from_rate < to_rate:
        raise ValueError("upsampling not supported: from_rate must be >= to_rate")
    signal = np.asarray(signal, dtype=float)
    if from_rate == to_rate:
        return signal.copy()
    if from_rate > 2.0 * to_rate:
        # anti-aliasing before decimation
        signal = zero_lag_lowpass(signal, 0.45 * to_rate, from_rate)
    n = signal.shape[-1]
    m = int(np.floor(n * to_rate / from_rate))
    positions = np.arange(m) * (from_rate / to_rate)
    flat = signal.reshape(-1, n)
    out = np.stack([np.interp(positions, np.arange(n), row) for row in flat])
    return out.reshape(signal.shape[:-1] + (m,))


def normalize_pair(
    session: RawSession, grf_fraction_max: float | None = None
) -> NormalizedSession:
    """Map GRF to [0, 1] via body weight and a shared ceiling; insole via 30 psi.

    ``grf_fraction_max`` is the dataset-wide maximum GRF expressed as a
    fraction of body weight; when omitted it is taken from this session and
    recorded. Values normalized against a preexisting ceiling are clipped to
    [0, 1.05] and then saturated at 1.
    """
    if session.profile.body_weight <= 0:
        raise ValueError("body weight must be positive")
    fraction = session.grf / (session.profile.body_weight * GRAVITY)
    peak = float(fraction.max())
    if peak <= 0:
        raise ValueError("session has zero GRF everywhere")
    scale = float(grf_fraction_max) if grf_fraction_max is not None else peak
    grf_norm = np.minimum(np.clip(fraction / scale, 0.0, 1.05), 1.0)
    insole_norm = np.clip(session.insole / INSOLE_MAX_PSI, 0.0, 1.0)
    return NormalizedSession(
        grf=grf_norm,
        insole=insole_norm,
        rate_hz=session.rate_hz,
        speed=session.speed,
        subject_id=session.profile.subject_id,
        scaling=ScalingInfo(grf_fraction_max=scale),
    )


def window_samples(session: NormalizedSession, window: int) -> list[dict]:
    """Cut a session into floor(n / window) disjoint samples, dropping the tail."""
    if window < 1:
        raise ValueError("window must be >= 1")
    n = session.grf.shape[-1]
    count = n // window
    samples = []
    for i in range(count):
        lo, hi = i * window, (i + 1) * window
        samples.append(
            {
                "insole": session.insole[:, lo:hi].astype(np.float32),
                "grf": session.grf[:, lo:hi].astype(np.float32),
                "subject_id": session.subject_id,
                "speed": session.speed,
            }
        )
    return samples


def loso_split(dataset: WindowedDataset, held_out: int) -> tuple[WindowedDataset, WindowedDataset]:
    """Split into (train, test) where test holds exactly one subject's samples."""
    if held_out not in dataset.subjects:
        raise ValueError(f"unknown subject_id {held_out}; have {dataset.subjects}")
    mask = dataset.subject_ids == held_out
    return dataset.subset(~mask), dataset.subset(mask)


def preprocess_session(session: RawSession, target_rate_hz: float = DEFAULT_RATE_HZ) -> RawSession:
    """Resample to the target rate, low-pass the GRF, and apply the coverage mask."""
    grf = session.grf
    insole = session.insole
    rate = session.rate_hz
    if rate != target_rate_hz:
        grf = resample_to(grf, rate, target_rate_hz)
        flat = insole.reshape(2, insole.shape[1], -1).transpose(0, 2, 1)
        flat = resample_to(flat, rate, target_rate_hz)
        insole = flat.transpose(0, 2, 1).reshape(2, -1, GRID_ROWS, GRID_COLS)
        rate = target_rate_hz
    grf = np.clip(zero_lag_lowpass(grf, GRF_CUTOFF_HZ, rate), 0.0, None)
    insole = apply_fraction(insole, fraction_mask())
    warm = int(round(WARMUP_SECONDS * rate))
    return RawSession(
        grf=grf[:, warm:],
        insole=insole[:, warm:],
        rate_hz=rate,
        speed=session.speed,
        profile=session.profile,
    )


def build_dataset(
    seed: int,
    n_subjects: int,
    speeds: tuple[float, ...] = SPEED_LEVELS,
    duration_s: float = 120.0,
    window: int = 100,
    rate_hz: float = DEFAULT_RATE_HZ,
) -> WindowedDataset:
    """Full pipeline: profiles -> sessions -> preprocessing -> windows.

    ``duration_s`` is the recorded length including the warm-up that gets
    trimmed. The GRF [0, 1] ceiling is the maximum body-weight fraction over
    all generated sessions and is recorded for inverse mapping.
    """
    processed: list[RawSession] = []
    body_weights: dict[int, float] = {}
    for sid in range(n_subjects):
        profile = make_profile(seed, sid)
        body_weights[sid] = profile.body_weight
        for speed in speeds:
            raw = synth_session(profile, speed, duration_s, rate_hz)
            processed.append(preprocess_session(raw))

    scale = max(
        float((s.grf / (s.profile.body_weight * GRAVITY)).max()) for s in processed
    )
    all_samples: list[dict] = []
    for sess in processed:
        norm = normalize_pair(sess, grf_fraction_max=scale)
        all_samples.extend(window_samples(norm, window))

    if not all_samples:
        raise ValueError("no samples produced; session shorter than one window?")
    return WindowedDataset(
        insole=np.stack([s["insole"] for s in all_samples]),
        grf=np.stack([s["grf"] for s in all_samples]),
        subject_ids=np.asarray([s["subject_id"] for s in all_samples], dtype=np.int64),
        speeds=np.asarray([s["speed"] for s in all_samples], dtype=np.float32),
        window=window,
        scaling=ScalingInfo(grf_fraction_max=scale),
        body_weights=body_weights,
    )


def desk_dataset(seed: int = 7, window: int = 100) -> WindowedDataset:
    """Small-but-trainable default: 4 subjects x 2 speeds x 2 minutes."""
    return build_dataset(
        seed=seed, n_subjects=4, speeds=(0.88, 1.25), duration_s=120.0, window=window
    )


def full_session_duration_s(rate_hz: float = DEFAULT_RATE_HZ) -> float:
    """Recording length whose usable part yields 559 windows of 100 (279 of 200)."""
    return FULL_SESSION_SAMPLES / rate_hz + WARMUP_SECONDS
