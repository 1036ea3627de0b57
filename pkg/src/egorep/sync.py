"""Alignment of raw recordings and derivation of movement labels.

Covers the three preprocessing steps a multi-device capture needs before the
training pipeline can consume it: audio cross-correlation to recover clock
offsets between devices, a RANSAC homography between the eye-tracker frame
and the scene camera frame, and per-body-part movement labels from wearable
IMU orientation tracks.
"""

from __future__ import annotations

import csv
import warnings
from pathlib import Path

import numpy as np
from scipy import signal
from scipy.io import wavfile

from .objectives import PARTS, MovementTarget

# one orientation sensor per limb segment, two segments per limb
SENSORS = (
    "torso",
    "neck",
    "right_tricep",
    "left_tricep",
    "right_forearm",
    "left_forearm",
    "right_thigh",
    "left_thigh",
    "right_leg",
    "left_leg",
)

SENSOR_GROUPS = {
    "torso": ("torso",),
    "neck": ("neck",),
    "right_arm": ("right_tricep", "right_forearm"),
    "left_arm": ("left_tricep", "left_forearm"),
    "right_leg": ("right_thigh", "right_leg"),
    "left_leg": ("left_thigh", "left_leg"),
}

# per-sensor frame codes used while combining sensors into a part label
_STILL, _MOVING, _GRAY, _MISSING = 0, 1, 2, 3


class DegenerateSensorWarning(UserWarning):
    """A sensor track carried no usable variation; its frames go gray."""


# ---------------------------------------------------------------------------
# audio offset


def audio_offset(reference: np.ndarray, other: np.ndarray, rate: float) -> float:
    """Clock offset of ``other`` relative to ``reference`` in seconds.

    A positive value means ``other`` recorded the same events later, i.e.
    subtract it from ``other``'s timestamps to align the two devices.  The
    peak of the FFT cross-correlation is refined to sub-sample precision with
    a parabolic fit, so the result is not quantized to 1/rate.
    """
    a = np.asarray(reference, dtype=np.float64)
    b = np.asarray(other, dtype=np.float64)
    if a.ndim != 1 or b.ndim != 1 or len(a) < 2 or len(b) < 2:
        raise ValueError("audio signals must be 1-D with at least two samples")
    if rate <= 0:
        raise ValueError("sample rate must be positive")
    a = a - a.mean()
    b = b - b.mean()
    if not a.any() or not b.any():
        raise ValueError("audio signal is constant; offset is undefined")
    corr = signal.correlate(a, b, mode="full", method="fft")
    lags = signal.correlation_lags(len(a), len(b), mode="full")
    peak = int(np.argmax(corr))
    delta = 0.0
    if 0 < peak < len(corr) - 1:
        left, mid, right = corr[peak - 1], corr[peak], corr[peak + 1]
        denom = left - 2 * mid + right
        if abs(denom) > 1e-12 * max(abs(mid), 1.0):
            delta = 0.5 * (left - right) / denom
            delta = float(np.clip(delta, -0.5, 0.5))
    return -(lags[peak] + delta) / rate


# ---------------------------------------------------------------------------
# gaze-to-scene homography


def _normalize_points(pts: np.ndarray):
    centroid = pts.mean(axis=0)
    spread = np.sqrt(((pts - centroid) ** 2).sum(axis=1)).mean()
    if spread < 1e-12:
        raise np.linalg.LinAlgError("points are coincident")
    s = np.sqrt(2.0) / spread
    T = np.array([
        [s, 0.0, -s * centroid[0]],
        [0.0, s, -s * centroid[1]],
        [0.0, 0.0, 1.0],
    ])
    return (pts - centroid) * s, T


def _dlt(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    srcn, t_src = _normalize_points(src)
    dstn, t_dst = _normalize_points(dst)
    n = len(src)
    a = np.zeros((2 * n, 9))
    x, y = srcn[:, 0], srcn[:, 1]
    u, v = dstn[:, 0], dstn[:, 1]
    a[0::2, 0] = -x
    a[0::2, 1] = -y
    a[0::2, 2] = -1.0
    a[0::2, 6] = u * x
    a[0::2, 7] = u * y
    a[0::2, 8] = u
    a[1::2, 3] = -x
    a[1::2, 4] = -y
    a[1::2, 5] = -1.0
    a[1::2, 6] = v * x
    a[1::2, 7] = v * y
    a[1::2, 8] = v
    _, sv, vt = np.linalg.svd(a)
    if n > 4 and sv[-2] < 1e-12:
        raise np.linalg.LinAlgError("degenerate configuration")
    h = vt[-1].reshape(3, 3)
    h = np.linalg.inv(t_dst) @ h @ t_src
    if abs(h[2, 2]) < 1e-12:
        raise np.linalg.LinAlgError("homography at infinity")
    return h / h[2, 2]


def _transfer_errors(h: np.ndarray, src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    ones = np.ones((len(src), 1))
    mapped = np.hstack([src, ones]) @ h.T
    w = mapped[:, 2]
    err = np.full(len(src), np.inf)
    ok = np.abs(w) > 1e-12
    proj = mapped[ok, :2] / w[ok, None]
    err[ok] = np.sqrt(((proj - dst[ok]) ** 2).sum(axis=1))
    return err


def homography_errors(homography, src, dst) -> np.ndarray:
    """Transfer error of each correspondence: |H(src) - dst|, inf where the
    mapping degenerates."""
    h = np.asarray(homography, dtype=np.float64)
    if h.shape != (3, 3):
        raise ValueError(f"homography must be 3x3, got {h.shape}")
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 2:
        raise ValueError(f"point sets must both be (n, 2), got {src.shape} and {dst.shape}")
    return _transfer_errors(h, src, dst)


def estimate_homography(src: np.ndarray, dst: np.ndarray, *, iterations: int = 2000,
                        threshold: float = 3.0, min_inliers: int = 4,
                        seed: int = 0) -> np.ndarray:
    """Robust 3x3 homography mapping ``src`` points onto ``dst`` points.

    Normalized DLT inside a RANSAC loop, followed by a refit on the winning
    inlier set.  ``threshold`` is the transfer error in the units of the
    points (pixels for camera calibrations).  Raises ``ValueError`` when no
    model reaches ``min_inliers``.
    """
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 2:
        raise ValueError(f"point sets must both be (n, 2), got {src.shape} and {dst.shape}")
    n = len(src)
    if n < 4:
        raise ValueError(f"need at least 4 correspondences, got {n}")
    if not (np.isfinite(src).all() and np.isfinite(dst).all()):
        raise ValueError("correspondences contain non-finite values")
    rng = np.random.default_rng(seed)
    best_inliers = None
    best_count = 0
    for _ in range(iterations):
        idx = rng.choice(n, size=4, replace=False)
        try:
            h = _dlt(src[idx], dst[idx])
        except np.linalg.LinAlgError:
            continue
        inliers = _transfer_errors(h, src, dst) < threshold
        count = int(inliers.sum())
        if count > best_count:
            best_count = count
            best_inliers = inliers
            if count == n:
                break
    if best_inliers is None or best_count < min_inliers:
        raise ValueError(
            f"homography estimation failed: best model explains {best_count} of {n} points")
    try:
        return _dlt(src[best_inliers], dst[best_inliers])
    except np.linalg.LinAlgError as e:
        raise ValueError(f"homography refit failed: {e}") from e


def remap_gaze(gaze, homography: np.ndarray):
    """Map one gaze point through a homography; both frames use [0, 1]
    coordinates.  Returns the remapped (2,) point, or ``None`` when the point
    leaves the target frame."""
    h = np.asarray(homography, dtype=np.float64)
    if h.shape != (3, 3):
        raise ValueError(f"homography must be 3x3, got {h.shape}")
    p = np.array([gaze[0], gaze[1], 1.0])
    q = h @ p
    if abs(q[2]) < 1e-12:
        return None
    out = q[:2] / q[2]
    if np.any(out < 0.0) or np.any(out > 1.0):
        return None
    return out


# ---------------------------------------------------------------------------
# movement labels from orientation tracks


def rotation_angles(quats: np.ndarray) -> np.ndarray:
    """Angle in radians between consecutive unit quaternions of a track.

    Sign-insensitive: q and -q describe the same rotation, so the absolute
    dot product is used before the arccos.
    """
    q = np.asarray(quats, dtype=np.float64)
    if q.ndim != 2 or q.shape[1] != 4:
        raise ValueError(f"quaternion track must be (t, 4), got {q.shape}")
    norms = np.linalg.norm(q, axis=1)
    if np.any(norms < 1e-12):
        raise ValueError("quaternion track contains a zero quaternion")
    q = q / norms[:, None]
    dots = np.abs((q[:-1] * q[1:]).sum(axis=1))
    return 2.0 * np.arccos(np.clip(dots, 0.0, 1.0))


def movement_magnitudes(sensor_times: np.ndarray, quats: np.ndarray,
                        frame_times: np.ndarray,
                        frame_interval: float | None = None) -> np.ndarray:
    """Angular speed (rad/s) of one sensor at each video frame.

    Each frame takes the speed of the nearest consecutive-sample pair; frames
    farther than two frame intervals from any sensor sample become NaN, so
    recording gaps surface as missing rather than stale values.
    """
    t = np.asarray(sensor_times, dtype=np.float64)
    ft = np.asarray(frame_times, dtype=np.float64)
    if t.ndim != 1 or len(t) != len(quats):
        raise ValueError("sensor times and quaternions must align 1:1")
    if np.any(np.diff(t) <= 0) or (len(ft) > 1 and np.any(np.diff(ft) <= 0)):
        raise ValueError("timestamps must be strictly increasing")
    if frame_interval is None:
        if len(ft) < 2:
            raise ValueError("cannot infer the frame interval from a single frame")
        frame_interval = float(np.median(np.diff(ft)))
    if frame_interval <= 0:
        raise ValueError("frame interval must be positive")
    if len(t) < 2:
        return np.full(len(ft), np.nan)
    speeds = rotation_angles(quats) / np.diff(t)
    mids = (t[:-1] + t[1:]) / 2.0

    def _nearest(grid: np.ndarray, query: np.ndarray) -> np.ndarray:
        right = np.clip(np.searchsorted(grid, query), 0, len(grid) - 1)
        left = np.clip(right - 1, 0, len(grid) - 1)
        return np.where(np.abs(grid[right] - query) < np.abs(grid[left] - query),
                        right, left)

    out = speeds[_nearest(mids, ft)].copy()
    # the distance to the nearest actual sample decides staleness, so a pair
    # of samples straddling a recording gap cannot hide it
    sample_dist = np.abs(t[_nearest(t, ft)] - ft)
    out[sample_dist > 2.0 * frame_interval] = np.nan
    return out


def _sensor_codes(magnitudes: np.ndarray, name: str) -> np.ndarray:
    m = np.asarray(magnitudes, dtype=np.float64)
    codes = np.full(m.shape, _MISSING, dtype=np.uint8)
    finite = np.isfinite(m)
    values = m[finite]
    if np.unique(values).size < 2:
        warnings.warn(f"sensor {name}: too little variation to set tertile "
                      "thresholds; all frames marked gray", DegenerateSensorWarning)
        codes[finite] = _GRAY
        return codes
    t1, t2 = np.quantile(values, [1.0 / 3.0, 2.0 / 3.0])
    codes[finite] = _GRAY
    codes[finite & (m <= t1)] = _STILL
    # inclusive boundaries; when the tertiles coincide, moving wins
    codes[finite & (m >= t2)] = _MOVING
    return codes


def label_movements(magnitudes: dict[str, np.ndarray]) -> MovementTarget:
    """Per-frame binary movement labels for the six body parts.

    Per sensor, the lower third of its speed distribution counts as still and
    the upper third as moving; the middle third is a gray area.  A part moves
    if any of its sensors moves.  A part is confidently still only when every
    sensor confirms it; gray or missing readings otherwise drop the frame
    from the loss via the mask.
    """
    if not magnitudes:
        raise ValueError("no sensor magnitudes given")
    unknown = sorted(set(magnitudes) - set(SENSORS))
    if unknown:
        raise ValueError(f"unknown sensors {unknown}; expected names from {SENSORS}")
    lengths = {len(v) for v in magnitudes.values()}
    if len(lengths) != 1:
        raise ValueError(f"sensor tracks differ in length: {sorted(lengths)}")
    n_frames = lengths.pop()
    labels = np.zeros((n_frames, len(PARTS)), dtype=np.uint8)
    mask = np.zeros((n_frames, len(PARTS)), dtype=bool)
    for pi, part in enumerate(PARTS):
        group = SENSOR_GROUPS[part]
        codes = [_sensor_codes(magnitudes[s], s) for s in group if s in magnitudes]
        missing_sensors = len(codes) < len(group)
        if not codes:
            continue  # no data at all: label 0, mask off
        arr = np.stack(codes)
        moving = (arr == _MOVING).any(axis=0)
        uncertain = ((arr == _GRAY) | (arr == _MISSING)).any(axis=0) | missing_sensors
        labels[:, pi] = moving
        mask[:, pi] = moving | ~uncertain
    return MovementTarget(labels, mask)


# ---------------------------------------------------------------------------
# file readers for the command line

def load_wav(path) -> tuple[int, np.ndarray]:
    """Mono float64 samples in [-1, 1] plus the sample rate."""
    rate, samples = wavfile.read(Path(path))
    samples = np.asarray(samples)
    if samples.ndim == 2:
        samples = samples.mean(axis=1)
    if np.issubdtype(samples.dtype, np.integer):
        samples = samples / float(max(abs(int(np.iinfo(samples.dtype).min)),
                                      int(np.iinfo(samples.dtype).max)))
    return int(rate), samples.astype(np.float64)


def _read_csv_rows(path, n_columns: int) -> np.ndarray:
    rows = []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh)):
            if not row or all(not cell.strip() for cell in row):
                continue
            try:
                values = [float(cell) for cell in row]
            except ValueError:
                if not rows and lineno == 0:
                    continue  # header row
                raise ValueError(f"{path}:{lineno + 1}: non-numeric row {row!r}") from None
            if len(values) != n_columns:
                raise ValueError(
                    f"{path}:{lineno + 1}: expected {n_columns} columns, got {len(values)}")
            rows.append(values)
    if not rows:
        raise ValueError(f"{path}: no data rows")
    return np.asarray(rows, dtype=np.float64)


def load_imu_csv(path) -> tuple[np.ndarray, np.ndarray]:
    """Columns t, qw, qx, qy, qz (an optional header row is skipped)."""
    arr = _read_csv_rows(path, 5)
    return arr[:, 0], arr[:, 1:]


def load_imu_table(path) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """One CSV holding every sensor: t, sensor_id, qw, qx, qy, qz.

    ``sensor_id`` is a name from SENSORS or its integer index.  Returns
    {sensor: (times, quats)} with each track sorted by time.
    """
    by_sensor: dict[str, list] = {}
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh)):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != 6:
                raise ValueError(f"{path}:{lineno + 1}: expected 6 columns, got {len(row)}")
            try:
                t = float(row[0])
                quat = [float(c) for c in row[2:]]
            except ValueError:
                if lineno == 0 and not by_sensor:
                    continue  # header row
                raise ValueError(f"{path}:{lineno + 1}: non-numeric row {row!r}") from None
            sid = row[1].strip()
            if sid not in SENSORS:
                try:
                    sid = SENSORS[int(sid)]
                except (ValueError, IndexError):
                    raise ValueError(
                        f"{path}:{lineno + 1}: unknown sensor {row[1]!r}; expected a "
                        f"name from {SENSORS} or an index 0..{len(SENSORS) - 1}") from None
            by_sensor.setdefault(sid, []).append((t, *quat))
    if not by_sensor:
        raise ValueError(f"{path}: no data rows")
    out = {}
    for name, rows in by_sensor.items():
        arr = np.asarray(sorted(rows), dtype=np.float64)
        out[name] = (arr[:, 0], arr[:, 1:])
    return out


def load_points_csv(path) -> tuple[np.ndarray, np.ndarray]:
    """Columns x_src, y_src, x_dst, y_dst (an optional header row is skipped)."""
    arr = _read_csv_rows(path, 4)
    return arr[:, :2], arr[:, 2:]
