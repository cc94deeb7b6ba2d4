"""Spectral and envelope analysis of rendered audio, plus the three
model-optimization experiment runners.

The analysis suite quantifies whether the audio actually carries the
displacement information: short-time spectra, RMS envelopes, spectral
centroid (a brightness proxy), Pearson correlation between the pooled
displacement-magnitude envelope and the audio RMS envelope, and transition
detection on envelopes (the audible counterpart of interface punctures).

Experiment runners sweep one configuration axis each and emit CSV-ready
reports:

* nodal characterization: impulse response of every sound node in isolation,
* sonic-area definition: driver region radius around the target,
* nodal-contribution impact: number of drivers inside the sonic area.
"""

from __future__ import annotations

import concurrent.futures
import os
import warnings
from dataclasses import dataclass

import numpy as np

from . import scenario as scenario_mod
from .scenario import Scenario
from .synth import AudioBuffer, Driver, Listener, render, write_wav


class AnalysisError(ValueError):
    """Invalid analysis input."""


@dataclass
class Spectrogram:
    frame_times: np.ndarray       # (n_frames,) s
    bin_frequencies: np.ndarray   # (n_bins,) Hz, ascending, max = rate/2
    magnitudes: np.ndarray        # (n_frames, n_bins) >= 0
    window_size: int
    hop: int
    sample_rate: float


@dataclass
class EnvelopeSeries:
    times: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        if (np.diff(self.times) <= 0).any():
            raise AnalysisError("envelope times must be strictly increasing")
        if not np.isfinite(self.values).all():
            raise AnalysisError("envelope values must be finite")


@dataclass
class ExperimentReport:
    kind: str
    swept_parameter: str
    columns: tuple[str, ...]
    rows: tuple[tuple, ...]

    def write_csv(self, path) -> None:
        lines = [",".join(self.columns)]
        for row in self.rows:
            lines.append(",".join("" if v is None else str(v) for v in row))
        scenario_mod.write_text_atomic(path, "\n".join(lines) + "\n")


def _hann_periodic(n: int) -> np.ndarray:
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def stft(buffer: AudioBuffer, window_size: int = 2048,
         hop: int = 512) -> Spectrogram:
    """Hann-windowed magnitude short-time Fourier transform."""
    if window_size < 2 or window_size & (window_size - 1):
        raise AnalysisError("window_size must be a power of two")
    if not 1 <= hop <= window_size:
        raise AnalysisError("hop must be in [1, window_size]")
    x = np.asarray(buffer.samples, dtype=float)
    if x.shape[0] < window_size:
        raise AnalysisError("buffer shorter than one window")
    n_frames = 1 + (x.shape[0] - window_size) // hop
    starts = np.arange(n_frames) * hop
    window = _hann_periodic(window_size)
    idx = starts[:, None] + np.arange(window_size)[None, :]
    magnitudes = np.abs(np.fft.rfft(x[idx] * window, axis=1))
    return Spectrogram(
        frame_times=(starts + window_size / 2) / buffer.sample_rate,
        bin_frequencies=np.fft.rfftfreq(window_size, 1.0 / buffer.sample_rate),
        magnitudes=magnitudes,
        window_size=window_size, hop=hop, sample_rate=buffer.sample_rate)


def rms_envelope(buffer: AudioBuffer, frame_len: int, hop: int) -> EnvelopeSeries:
    """Per-frame root-mean-square of the signal."""
    if frame_len < 1:
        raise AnalysisError("frame_len must be >= 1")
    x = np.asarray(buffer.samples, dtype=float)
    if x.shape[0] == 0:
        raise AnalysisError("empty buffer")
    if x.shape[0] < frame_len:
        raise AnalysisError("buffer shorter than one frame")
    n_frames = 1 + (x.shape[0] - frame_len) // hop
    starts = np.arange(n_frames) * hop
    idx = starts[:, None] + np.arange(frame_len)[None, :]
    values = np.sqrt(np.mean(x[idx] ** 2, axis=1))
    times = (starts + frame_len / 2) / buffer.sample_rate
    return EnvelopeSeries(times=times, values=values)


def spectral_centroid(spec: Spectrogram) -> EnvelopeSeries:
    """Magnitude-weighted mean frequency per frame; silent frames give 0."""
    if spec.magnitudes.size == 0:
        raise AnalysisError("empty spectrogram")
    totals = spec.magnitudes.sum(axis=1)
    weighted = spec.magnitudes @ spec.bin_frequencies
    with np.errstate(invalid="ignore", divide="ignore"):
        centroid = np.where(totals > 0, weighted / np.maximum(totals, 1e-300), 0.0)
    return EnvelopeSeries(times=spec.frame_times.copy(), values=centroid)


def correlate(a: EnvelopeSeries, b: EnvelopeSeries) -> float:
    """Pearson correlation of two envelopes on a common time grid.

    Both series are linearly interpolated onto the overlap of their time
    ranges.  Constant series have no defined correlation and are rejected.
    """
    t0 = max(a.times[0], b.times[0])
    t1 = min(a.times[-1], b.times[-1])
    if t1 <= t0:
        raise AnalysisError("envelope time ranges do not overlap")
    n = max(len(a.times), len(b.times), 3)
    grid = np.linspace(t0, t1, n)
    av = np.interp(grid, a.times, a.values)
    bv = np.interp(grid, b.times, b.values)
    if av.std() == 0 or bv.std() == 0:
        raise AnalysisError("correlation undefined for a constant series")
    return float(np.corrcoef(av, bv)[0, 1])


def detect_transitions(envelope: EnvelopeSeries, smoothing_win: int,
                       k_sigma: float,
                       merge_window_s: float = 0.3) -> list[float]:
    """Times where the smoothed envelope rises anomalously fast.

    Smooths with a moving average, flags first differences above
    ``k_sigma`` standard deviations of the differences, and merges events
    closer than ``merge_window_s``, keeping the largest.  A constant
    envelope yields no events.  Samples within one smoothing window of the
    series edges are never flagged (the centered moving average is
    zero-padded there).
    """
    values = np.asarray(envelope.values, dtype=float)
    if values.shape[0] < smoothing_win:
        raise AnalysisError("envelope shorter than the smoothing window")
    if smoothing_win >= 1:
        kernel = np.ones(smoothing_win) / smoothing_win
        smoothed = np.convolve(values, kernel, mode="same")
    else:
        raise AnalysisError("smoothing_win must be >= 1")
    diffs = np.diff(smoothed)
    sigma = diffs.std()
    if sigma == 0:
        return []
    hits = np.nonzero(diffs > k_sigma * sigma)[0]
    guard = smoothing_win
    hits = hits[(hits >= guard) & (hits < diffs.shape[0] - guard)]
    if hits.size == 0:
        return []
    times = envelope.times[hits + 1]
    events: list[tuple[float, float]] = []  # (time, diff magnitude)
    for t, mag in zip(times, diffs[hits]):
        if events and t - events[-1][0] < merge_window_s:
            if mag > events[-1][1]:
                events[-1] = (t, mag)
        else:
            events.append((float(t), float(mag)))
    return [t for t, _ in events]


# ---------------------------------------------------------------------------
# scenario-level envelopes and correlation

def displacement_envelope(scn: Scenario) -> EnvelopeSeries:
    """Pooled displacement-magnitude envelope: per-frame mean over the
    anatomical nodes mapped to sound nodes."""
    in_map = np.isin(scn.trace.node_ids, scn.mapped_node_ids)
    norms = scn.trace.norms()[:, in_map]
    return EnvelopeSeries(times=scn.trace.times, values=norms.mean(axis=1))


def audio_rms_envelope(buffer: AudioBuffer,
                       envelope_rate_hz: float = 100.0) -> EnvelopeSeries:
    frame = max(1, int(round(buffer.sample_rate / envelope_rate_hz)))
    return rms_envelope(buffer, frame_len=frame, hop=frame)


def displacement_audio_correlation(scn: Scenario, buffer: AudioBuffer) -> float:
    """Pearson r between the displacement envelope and the audio RMS envelope
    on a common grid at the configured envelope rate."""
    disp = displacement_envelope(scn)
    audio = audio_rms_envelope(buffer, scn.config.analysis.envelope_rate_hz)
    return correlate(disp, audio)


def detect_audio_transitions(scn: Scenario, buffer: AudioBuffer) -> list[float]:
    """Transition times detected on the audio RMS envelope, using the
    scenario's analysis settings."""
    cfg = scn.config.analysis
    env = audio_rms_envelope(buffer, cfg.envelope_rate_hz)
    win = max(1, int(round(cfg.detect_smoothing_s * cfg.envelope_rate_hz)))
    return detect_transitions(env, smoothing_win=win, k_sigma=cfg.detect_k_sigma,
                              merge_window_s=cfg.merge_window_s)


# ---------------------------------------------------------------------------
# experiment runners

def _sweep_workers() -> int:
    raw = os.environ.get("BIOSONIX_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def _sweep_map(fn, values):
    """Run sweep points, optionally in parallel; order follows ``values``."""
    workers = _sweep_workers()
    if workers == 1 or len(values) <= 1:
        return [fn(v) for v in values]
    with concurrent.futures.ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, values))


def measure_dominant_frequency(samples: np.ndarray, sample_rate: float,
                               min_hz: float = 20.0) -> float:
    """Frequency of the largest spectral peak at or above ``min_hz``.

    Uses the velocity (first-difference) spectrum so the measurement reflects
    where the oscillation energy sits rather than low-frequency displacement
    drift.
    """
    x = np.diff(np.asarray(samples, dtype=float))
    if x.size < 8 or not x.any():
        return 0.0
    spectrum = np.abs(np.fft.rfft(x))
    freqs = np.fft.rfftfreq(x.shape[0], 1.0 / sample_rate)
    valid = freqs >= min_hz
    if not valid.any():
        return 0.0
    return float(freqs[valid][np.argmax(spectrum[valid])])


def _clamped_copy(network, free_mass: int):
    """Copy of the network with every mass except ``free_mass`` clamped."""
    from .synth import MassSpringNetwork
    fixed = np.ones(network.n_masses, dtype=bool)
    fixed[free_mass] = False
    return MassSpringNetwork(
        masses=network.masses.copy(), class_ids=network.class_ids.copy(),
        fixed=fixed, damping_z=network.damping_z.copy(),
        spring_i=network.spring_i.copy(), spring_j=network.spring_j.copy(),
        spring_k=network.spring_k.copy(), topology_kind=network.topology_kind,
        station_of_mass=network.station_of_mass,
        axis_mass_of_station=network.axis_mass_of_station)


def run_nodal_characterization(scn: Scenario, impulse_newtons: float = 1.0,
                               response_seconds: float = 1.0) -> ExperimentReport:
    """Impulse each sound node in isolation; record its dominant frequency
    and RMS, grouped by tissue class.

    Isolation means the rest of the network is clamped while the node rings,
    so the measurement reflects the node's own mass and attached stiffness
    (its contribution to the mix) rather than the network's global modes.
    Fixed end nodes are skipped with a note.
    """
    network = scenario_mod.build_network(scn)
    audio_rate = scn.audio_rate
    n_samples = int(round(response_seconds * audio_rate))
    impulse = np.zeros(n_samples)
    impulse[0] = impulse_newtons
    name_of = {c.id: c.name for c in scn.domain.classes}

    def one(station: int):
        mass = int(network.axis_mass_of_station[station])
        cls = name_of[int(scn.path.station_class_ids[station])]
        if network.fixed[mass]:
            return (station, cls, None, None, "fixed")
        clamped = _clamped_copy(network, mass)
        buf = render(clamped, [Driver(mass_index=mass, force_signal=impulse)],
                     [Listener(mass_index=mass, gain=1.0)],
                     response_seconds, audio_rate, normalize=False)
        freq = measure_dominant_frequency(buf.samples, audio_rate)
        rms = float(np.sqrt(np.mean(np.asarray(buf.samples, dtype=float) ** 2)))
        return (station, cls, freq, rms, "")

    rows = _sweep_map(one, list(range(scn.path.n_stations)))
    rows.sort(key=lambda r: (r[1], r[0]))
    return ExperimentReport(
        kind="nodal_characterization", swept_parameter="station",
        columns=("station", "class", "dominant_freq_hz", "rms", "note"),
        rows=tuple(rows))


def run_sonic_area_sweep(scn: Scenario, radii: list[float]) -> ExperimentReport:
    """Sweep the driver-region radius around the target-segment start.

    For each radius the drivers are every sound node within that axial
    distance of the target start; the report records RMS, mean centroid and
    displacement-audio correlation.  The smallest radius whose correlation
    is within 5% of the largest radius's correlation is marked as the
    minimal informative region.
    """
    if not radii:
        raise AnalysisError("radius list must not be empty")
    span = scenario_mod.target_segment_span(scn)
    if span is None:
        raise AnalysisError("sonic-area sweep needs target_class_id in the scenario")
    unique_radii = sorted(set(float(r) for r in radii))
    cfg = scn.config.analysis

    def one(radius: float):
        stations = scenario_mod.sonic_area_stations(scn, radius=radius)
        buf = scenario_mod.render_scenario(scn, stations=stations)
        spec = stft(buf, cfg.stft_window, cfg.stft_hop)
        centroid = spectral_centroid(spec)
        rms = float(np.sqrt(np.mean(np.asarray(buf.samples, dtype=float) ** 2)))
        try:
            r = displacement_audio_correlation(scn, buf)
        except AnalysisError:
            r = None
        return [radius, len(stations), rms, float(centroid.values.mean()), r]

    rows = _sweep_map(one, unique_radii)
    r_ref = rows[-1][4]
    minimal_radius = None
    if r_ref is not None:
        for row in rows:
            if row[4] is not None and abs(row[4] - r_ref) <= 0.05 * abs(r_ref):
                minimal_radius = row[0]
                break
    out = [tuple(row + [row[0] == minimal_radius]) for row in rows]
    return ExperimentReport(
        kind="sonic_area", swept_parameter="radius_m",
        columns=("radius_m", "n_drivers", "rms", "centroid_mean_hz",
                 "correlation_r", "minimal_informative"),
        rows=tuple(out))


def run_contribution_sweep(scn: Scenario,
                           driver_counts: list[int]) -> ExperimentReport:
    """Sweep the number of drivers spread evenly through the sonic area.

    Records the centroid-gradient smoothness (mean absolute second
    difference of the centroid series, smaller is smoother) alongside RMS
    and correlation.  Counts beyond the available nodes are clamped with a
    warning; zero drivers produce a silence row with zero metrics.
    """
    if not driver_counts:
        raise AnalysisError("driver count list must not be empty")
    for d in driver_counts:
        if not isinstance(d, (int, np.integer)) or isinstance(d, bool):
            raise AnalysisError(f"driver counts must be integers, got {d!r}")
        if d < 0:
            raise AnalysisError("driver counts must be >= 0")
    area = scenario_mod.sonic_area_stations(scn)
    cfg = scn.config.analysis
    counts = sorted(set(int(d) for d in driver_counts))

    def one(count: int):
        if count > len(area):
            warnings.warn(f"driver count {count} exceeds the {len(area)} sonic-area "
                          f"nodes; clamped", RuntimeWarning, stacklevel=2)
            used = len(area)
        else:
            used = count
        if used == 0:
            return (count, 0, 0.0, 0.0, 0.0, None)
        picks = np.unique(np.round(np.linspace(0, len(area) - 1, used)).astype(int))
        stations = [area[i] for i in picks]
        buf = scenario_mod.render_scenario(scn, stations=stations)
        spec = stft(buf, cfg.stft_window, cfg.stft_hop)
        centroid = spectral_centroid(spec).values
        smoothness = (float(np.abs(np.diff(centroid, n=2)).mean())
                      if centroid.shape[0] >= 3 else 0.0)
        rms = float(np.sqrt(np.mean(np.asarray(buf.samples, dtype=float) ** 2)))
        try:
            r = displacement_audio_correlation(scn, buf)
        except AnalysisError:
            r = None
        return (count, len(stations), rms, float(centroid.mean()), smoothness, r)

    rows = _sweep_map(one, counts)
    return ExperimentReport(
        kind="nodal_contribution", swept_parameter="driver_count",
        columns=("driver_count", "n_drivers_used", "rms", "centroid_mean_hz",
                 "centroid_smoothness", "correlation_r"),
        rows=tuple(rows))


# ---------------------------------------------------------------------------
# exports

def spectrogram_to_csv(spec: Spectrogram, path) -> None:
    """Frames-by-bins magnitude dump; first column is the frame time."""
    header = "time_s," + ",".join(f"{f:.6g}" for f in spec.bin_frequencies)
    lines = [header]
    for t, row in zip(spec.frame_times, spec.magnitudes):
        lines.append(f"{t:.9g}," + ",".join(f"{v:.9g}" for v in row))
    scenario_mod.write_text_atomic(path, "\n".join(lines) + "\n")


def spectrogram_to_pgm(spec: Spectrogram, path, floor_db: float = 80.0) -> None:
    """8-bit grayscale PGM of log magnitude with the given dB floor.

    Rows run from the highest frequency bin (top) to the lowest (bottom),
    columns are time frames; white is loud.
    """
    mags = spec.magnitudes
    peak = mags.max()
    if peak <= 0:
        db = np.full_like(mags, -floor_db, dtype=float)
    else:
        with np.errstate(divide="ignore"):
            db = 20.0 * np.log10(np.maximum(mags, peak * 10.0 ** (-floor_db / 20.0 - 1)) / peak)
        db = np.clip(db, -floor_db, 0.0)
    gray = np.round((db + floor_db) / floor_db * 255.0).astype(np.uint8)
    image = gray.T[::-1]  # rows = bins, high frequencies on top
    header = f"P5\n{image.shape[1]} {image.shape[0]}\n255\n".encode("ascii")
    scenario_mod.write_bytes_atomic(path, header + image.tobytes())
