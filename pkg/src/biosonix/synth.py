"""Damped mass-spring sound networks integrated at audio rate.

Masses carry a single scalar displacement degree of freedom and are advanced
with an explicit position-Verlet step with per-mass viscous damping:

    y+ = 2 y - y- + (dt^2 / m) * [F - sum_k K_jk (y - y_k) - (z / dt) (y - y-)]

Fixed masses stay at 0.  Stability requires, per mass,

    (dt^2 / m) * sum_k K_jk + (dt / m) * z  <=  4 * (1 - eps),  eps = 0.05.

Rendering drives the network with per-sample forces at Driver masses, mixes
Listener mass displacements, removes the quasi-static offset left by
non-negative excitation forces with a first-order 20 Hz DC blocker, and
optionally peak-normalizes to -1 dBFS.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field

import numpy as np
import scipy.signal
import scipy.sparse

# Safety margin of the per-mass stability bound.
STABILITY_EPS = 0.05

# High-pass cutoff removing the excitation's static offset, and the number
# of cascaded first-order sections applied.
DC_BLOCK_CUTOFF_HZ = 20.0
DC_BLOCK_SECTIONS = 3

# Default 60 dB ring-down time of a free mass, seconds.
DEFAULT_DAMPING_TAU_S = 0.5

# Peak-normalization target: -1 dBFS.
MASTER_PEAK = 10.0 ** (-1.0 / 20.0)


class SynthError(ValueError):
    """Invalid sound-network construction or rendering request."""


class StabilityError(SynthError):
    """Network violates the integrator stability bound at the requested rate."""


class WavFormatError(ValueError):
    """Unreadable or unsupported WAV data."""


class TopologyKind(enum.Enum):
    STRING_1D = "string_1d"
    LATTICE_3D = "lattice_3d"


def damping_coefficient(mass: float, tau: float = DEFAULT_DAMPING_TAU_S) -> float:
    """Viscous damping z (N*s/m) giving a 60 dB amplitude decay in ``tau``."""
    return 2.0 * mass * np.log(1e3) / tau


def per_mass_stability_limit(dt: float, mass, damping_z) -> np.ndarray:
    """Largest total attached stiffness each mass tolerates at step ``dt``."""
    return (4.0 * (1.0 - STABILITY_EPS) - dt * np.asarray(damping_z) / np.asarray(mass)) \
        * np.asarray(mass) / dt ** 2


@dataclass
class MassSpringNetwork:
    """Masses, springs and integration state of one sound domain instance.

    Mutable only through :func:`step`/:func:`render`; distinct scenario
    renders each own their instance.
    """

    masses: np.ndarray            # (n,) kg
    class_ids: np.ndarray         # (n,) int
    fixed: np.ndarray             # (n,) bool
    damping_z: np.ndarray         # (n,) N*s/m
    spring_i: np.ndarray          # (n_springs,) int
    spring_j: np.ndarray          # (n_springs,) int
    spring_k: np.ndarray          # (n_springs,) N/m
    topology_kind: TopologyKind
    station_of_mass: np.ndarray | None = None   # (n,) station index, if applicable
    axis_mass_of_station: np.ndarray | None = None  # (n_stations,) mass index
    y: np.ndarray = field(init=False)
    y_prev: np.ndarray = field(init=False)
    _coupling: scipy.sparse.csr_matrix = field(init=False, repr=False)
    _total_k: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        n = self.masses.shape[0]
        if (self.masses <= 0).any():
            raise SynthError("all masses must be > 0")
        if (self.spring_i == self.spring_j).any():
            raise SynthError("a spring cannot connect a mass to itself")
        pairs = {(min(a, b), max(a, b))
                 for a, b in zip(self.spring_i.tolist(), self.spring_j.tolist())}
        if len(pairs) != self.spring_i.shape[0]:
            raise SynthError("duplicate spring between a mass pair")
        degree = np.zeros(n, dtype=int)
        np.add.at(degree, self.spring_i, 1)
        np.add.at(degree, self.spring_j, 1)
        if ((degree == 0) & ~self.fixed).any():
            raise SynthError("every non-fixed mass needs at least one spring")

        rows = np.concatenate([self.spring_i, self.spring_j])
        cols = np.concatenate([self.spring_j, self.spring_i])
        vals = np.concatenate([self.spring_k, self.spring_k])
        self._coupling = scipy.sparse.csr_matrix((vals, (rows, cols)), shape=(n, n))
        self._total_k = np.zeros(n)
        np.add.at(self._total_k, self.spring_i, self.spring_k)
        np.add.at(self._total_k, self.spring_j, self.spring_k)
        self.reset_state()

    @property
    def n_masses(self) -> int:
        return int(self.masses.shape[0])

    @property
    def n_springs(self) -> int:
        return int(self.spring_i.shape[0])

    def reset_state(self) -> None:
        self.y = np.zeros(self.n_masses)
        self.y_prev = np.zeros(self.n_masses)


@dataclass
class Driver:
    """External force signal (N, audio rate) injected at one mass."""

    mass_index: int
    force_signal: np.ndarray


@dataclass
class Listener:
    """Mass whose displacement is mixed into the output.

    ``gain=None`` means the mixer default 1/sqrt(#listeners).
    """

    mass_index: int
    gain: float | None = None


@dataclass
class AudioBuffer:
    """Mono sample stream; float32 so WAV round-trips are bit-exact."""

    sample_rate: float
    samples: np.ndarray
    channels: int = 1
    clip_count: int = 0
    listener_signals: np.ndarray | None = None  # raw pre-mix, when captured

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float32)
        if not np.isfinite(self.samples).all():
            raise SynthError("audio buffer contains non-finite samples")

    @property
    def duration(self) -> float:
        return self.samples.shape[0] / self.sample_rate


@dataclass
class StabilityReport:
    max_utilization: float
    offending_masses: list[int]
    passed: bool


def stability_check(network: MassSpringNetwork, dt: float) -> StabilityReport:
    """Per-mass utilization of the stability bound at step ``dt``.

    Utilization is (dt^2 * sum K + dt * z) / (4 m); the network passes iff the
    maximum over non-fixed masses stays at or below 1 - eps.
    """
    free = ~network.fixed
    if not free.any():
        return StabilityReport(0.0, [], True)
    util = (dt ** 2 * network._total_k[free] + dt * network.damping_z[free]) \
        / (4.0 * network.masses[free])
    limit = 1.0 - STABILITY_EPS
    free_idx = np.nonzero(free)[0]
    offending = free_idx[util > limit]
    return StabilityReport(float(util.max()), offending.tolist(),
                           bool(util.max() <= limit))


def build_string_topology(segmented_path, properties,
                          damping_tau: float = DEFAULT_DAMPING_TAU_S) -> MassSpringNetwork:
    """1D string of masses, one per sound node along the path.

    Each mass takes the (m, K) of its station's tissue class; consecutive
    masses are joined by a spring with the K of the deeper mass's class.
    Both end masses are fixed.
    """
    station_classes = np.asarray(segmented_path.station_class_ids, dtype=int)
    n = station_classes.shape[0]
    if n < 3:
        raise SynthError("string topology needs at least 3 sound nodes")
    masses = np.array([properties.mass_of(int(c)) for c in station_classes])
    spring_k = np.array([properties.stiffness_of(int(station_classes[i + 1]))
                         for i in range(n - 1)])
    fixed = np.zeros(n, dtype=bool)
    fixed[0] = fixed[-1] = True
    z = np.array([damping_coefficient(m, damping_tau) for m in masses])
    return MassSpringNetwork(
        masses=masses,
        class_ids=station_classes.copy(),
        fixed=fixed,
        damping_z=z,
        spring_i=np.arange(n - 1),
        spring_j=np.arange(1, n),
        spring_k=spring_k,
        topology_kind=TopologyKind.STRING_1D,
        station_of_mass=np.arange(n),
        axis_mass_of_station=np.arange(n),
    )


def build_lattice_topology(segmented_path, properties, cross_width: int,
                           damping_tau: float = DEFAULT_DAMPING_TAU_S) -> MassSpringNetwork:
    """3D lattice: a W x W cross-section of masses at every axial station.

    6-neighbor connectivity (1 axial + 2 orthogonal directions); every mass
    inherits the tissue class of its axial station.  Axial springs take the
    deeper station's K, in-plane springs the station's own K.  Both axial end
    slabs are fixed; lateral faces are free.
    """
    if cross_width < 3 or cross_width % 2 == 0:
        raise SynthError("cross_width must be an odd integer >= 3 "
                         "(use build_string_topology for a 1D model)")
    station_classes = np.asarray(segmented_path.station_class_ids, dtype=int)
    n_st = station_classes.shape[0]
    if n_st < 3:
        raise SynthError("lattice topology needs at least 3 stations")
    w = cross_width
    per_station = w * w
    n = n_st * per_station

    def idx(st, a, b):
        return st * per_station + a * w + b

    class_ids = np.repeat(station_classes, per_station)
    masses = np.array([properties.mass_of(int(c)) for c in class_ids])
    fixed = np.zeros(n, dtype=bool)
    fixed[:per_station] = True
    fixed[-per_station:] = True

    si, sj, sk = [], [], []
    for st in range(n_st - 1):
        k_axial = properties.stiffness_of(int(station_classes[st + 1]))
        for a in range(w):
            for b in range(w):
                si.append(idx(st, a, b))
                sj.append(idx(st + 1, a, b))
                sk.append(k_axial)
    for st in range(n_st):
        k_plane = properties.stiffness_of(int(station_classes[st]))
        for a in range(w):
            for b in range(w):
                if a + 1 < w:
                    si.append(idx(st, a, b))
                    sj.append(idx(st, a + 1, b))
                    sk.append(k_plane)
                if b + 1 < w:
                    si.append(idx(st, a, b))
                    sj.append(idx(st, a, b + 1))
                    sk.append(k_plane)

    z = np.array([damping_coefficient(m, damping_tau) for m in masses])
    center = (w // 2) * w + (w // 2)
    return MassSpringNetwork(
        masses=masses,
        class_ids=class_ids,
        fixed=fixed,
        damping_z=z,
        spring_i=np.array(si, dtype=int),
        spring_j=np.array(sj, dtype=int),
        spring_k=np.array(sk, dtype=float),
        topology_kind=TopologyKind.LATTICE_3D,
        station_of_mass=np.repeat(np.arange(n_st), per_station),
        axis_mass_of_station=np.arange(n_st) * per_station + center,
    )


def step(network: MassSpringNetwork, external_forces: np.ndarray,
         dt: float) -> np.ndarray:
    """Advance the network by one time step; returns the new displacements."""
    y, y_prev = network.y, network.y_prev
    spring = network._coupling.dot(y) - network._total_k * y
    accel = (external_forces + spring) * (dt ** 2 / network.masses)
    damp = (dt * network.damping_z / network.masses) * (y - y_prev)
    y_new = 2.0 * y - y_prev + accel - damp
    y_new[network.fixed] = 0.0
    network.y_prev = y
    network.y = y_new
    return y_new


def dc_block(samples: np.ndarray, sample_rate: float,
             cutoff_hz: float = DC_BLOCK_CUTOFF_HZ,
             sections: int = DC_BLOCK_SECTIONS) -> np.ndarray:
    """High-pass removing the quasi-static offset of non-negative forcing.

    Cascaded first-order sections; one section leaks too much sub-hertz
    deflection drift to keep the offset from dominating the output.
    """
    r = np.exp(-2.0 * np.pi * cutoff_hz / sample_rate)
    out = samples
    for _ in range(sections):
        out = scipy.signal.lfilter([1.0, -1.0], [1.0, -r], out)
    return out


def _master(samples: np.ndarray, normalize: bool) -> tuple[np.ndarray, int]:
    if normalize:
        peak = np.abs(samples).max() if samples.size else 0.0
        if peak > 0:
            samples = samples * (MASTER_PEAK / peak)
        return samples, 0
    clip_count = int((np.abs(samples) > 1.0).sum())
    return np.clip(samples, -1.0, 1.0), clip_count


def render(network: MassSpringNetwork, drivers: list[Driver],
           listeners: list[Listener], duration: float, audio_rate: float,
           normalize: bool = True,
           capture_listeners: bool = False) -> AudioBuffer:
    """Integrate the network for ``duration`` seconds and mix the listeners.

    The network state is zeroed at the start so identical inputs give
    bit-identical buffers.  Raises :class:`StabilityError` when the network
    violates the stability bound at dt = 1/audio_rate.
    """
    if not listeners:
        raise SynthError("render needs at least one listener")
    dt = 1.0 / audio_rate
    n_samples = int(round(duration * audio_rate))
    for d in drivers:
        if network.fixed[d.mass_index]:
            raise SynthError(f"driver at fixed mass {d.mass_index}")
        if d.force_signal.shape[0] < n_samples:
            raise SynthError(f"driver signal at mass {d.mass_index} is shorter "
                             f"than the render ({d.force_signal.shape[0]} < {n_samples})")
    report = stability_check(network, dt)
    if not report.passed:
        raise StabilityError(
            f"stability bound violated at {audio_rate} Hz: max utilization "
            f"{report.max_utilization:.3g} on masses {report.offending_masses[:5]}")

    network.reset_state()
    n = network.n_masses
    coupling = network._coupling
    inv_m_dt2 = dt ** 2 / network.masses
    damp_coef = dt * network.damping_z / network.masses
    total_k = network._total_k
    free = ~network.fixed

    listen_idx = np.array([l.mass_index for l in listeners], dtype=int)
    default_gain = 1.0 / np.sqrt(len(listeners))
    gains = np.array([l.gain if l.gain is not None else default_gain
                      for l in listeners])
    if not np.isfinite(gains).all():
        raise SynthError("listener gains must be finite")

    # Merge drivers sharing a mass so per-sample injection is a plain scatter.
    by_mass: dict[int, np.ndarray] = {}
    for d in drivers:
        sig = np.asarray(d.force_signal, dtype=float)[:n_samples]
        if d.mass_index in by_mass:
            by_mass[d.mass_index] = by_mass[d.mass_index] + sig
        else:
            by_mass[d.mass_index] = sig
    drive_idx = np.array(sorted(by_mass), dtype=int)
    if drive_idx.size:
        drive_sig = np.vstack([by_mass[int(i)] for i in drive_idx])
    else:
        drive_sig = np.zeros((0, n_samples))

    out = np.empty(n_samples)
    captured = np.empty((len(listeners), n_samples)) if capture_listeners else None
    y = network.y
    y_prev = network.y_prev
    force = np.zeros(n)
    for s in range(n_samples):
        if drive_idx.size:
            force[drive_idx] = drive_sig[:, s]
        spring = coupling.dot(y)
        spring -= total_k * y
        spring += force
        y_new = inv_m_dt2 * spring
        y_new -= damp_coef * (y - y_prev)
        y_new += 2.0 * y
        y_new -= y_prev
        y_new *= free
        out[s] = gains @ y_new[listen_idx]
        if capture_listeners:
            captured[:, s] = y_new[listen_idx]
        y_prev = y
        y = y_new
    network.y, network.y_prev = y, y_prev

    mixed = dc_block(out, audio_rate)
    mastered, clip_count = _master(mixed, normalize)
    return AudioBuffer(sample_rate=audio_rate, samples=mastered,
                       clip_count=clip_count, listener_signals=captured)


def write_listener_csv(times: np.ndarray, signals: np.ndarray, path) -> None:
    """Raw per-listener signal dump: time_s,listener_0,listener_1,..."""
    header = "time_s," + ",".join(f"listener_{i}" for i in range(signals.shape[0]))
    data = np.column_stack([times, signals.T])
    np.savetxt(path, data, delimiter=",", header=header, comments="")


def write_wav(buffer: AudioBuffer, path) -> None:
    """Write a mono IEEE-float 32-bit RIFF/WAVE file."""
    samples = np.asarray(buffer.samples, dtype="<f4")
    data = samples.tobytes()
    rate = int(round(buffer.sample_rate))
    byte_rate = rate * 4
    try:
        with open(path, "wb") as f:
            f.write(b"RIFF")
            # riff size = 4 (WAVE) + (8+18 fmt) + (8+4 fact) + (8+len data)
            f.write(struct.pack("<I", 4 + 26 + 12 + 8 + len(data)))
            f.write(b"WAVE")
            f.write(b"fmt ")
            f.write(struct.pack("<IHHIIHH", 18, 3, 1, rate, byte_rate, 4, 32))
            f.write(struct.pack("<H", 0))  # cbSize
            f.write(b"fact")
            f.write(struct.pack("<II", 4, samples.shape[0]))
            f.write(b"data")
            f.write(struct.pack("<I", len(data)))
            f.write(data)
    except OSError as exc:
        raise OSError(f"cannot write WAV to {path}: {exc}") from exc


def read_wav(path) -> AudioBuffer:
    """Read a mono IEEE-float 32-bit WAV written by :func:`write_wav`."""
    try:
        with open(path, "rb") as f:
            raw = f.read()
    except OSError as exc:
        raise OSError(f"cannot read WAV from {path}: {exc}") from exc
    if len(raw) < 12 or raw[:4] != b"RIFF" or raw[8:12] != b"WAVE":
        raise WavFormatError(f"{path}: not a RIFF/WAVE file")
    pos = 12
    fmt = None
    while pos + 8 <= len(raw):
        chunk_id = raw[pos:pos + 4]
        (size,) = struct.unpack_from("<I", raw, pos + 4)
        body = raw[pos + 8:pos + 8 + size]
        if chunk_id == b"fmt ":
            if size < 16:
                raise WavFormatError(f"{path}: fmt chunk too small")
            tag, channels, rate, _, _, bits = struct.unpack_from("<HHIIHH", body, 0)
            if tag != 3 or bits != 32:
                raise WavFormatError(f"{path}: expected IEEE float 32-bit, "
                                     f"got format {tag}/{bits} bits")
            if channels != 1:
                raise WavFormatError(f"{path}: expected mono, got {channels} channels")
            fmt = rate
        elif chunk_id == b"data":
            if fmt is None:
                raise WavFormatError(f"{path}: data chunk before fmt chunk")
            if len(body) < size:
                raise WavFormatError(f"{path}: truncated data chunk "
                                     f"({len(body)} of {size} bytes)")
            samples = np.frombuffer(body[:size], dtype="<f4").copy()
            return AudioBuffer(sample_rate=float(fmt), samples=samples)
        pos += 8 + size + (size % 2)
    raise WavFormatError(f"{path}: no data chunk found")
