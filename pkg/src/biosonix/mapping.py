"""Bridges between the anatomical and sound domains.

Three pure mappings:

* :func:`project_to_path` reduces the 3D domain to a 1D coordinate system
  along the tool path, divided into tissue-class segments, with one sound
  node per spring length of path and an anatomical-node -> sound-node map.
* :func:`map_properties` turns per-class (density, Young's modulus) into
  per-class oscillator (mass, stiffness), preserving stiffness ratios
  exactly while scaling the whole set into the audible and numerically
  stable range.
* :func:`compute_excitation` turns normalized displacement magnitudes into
  per-sound-node force signals at audio rate, F = K * |u|.

Displacement magnitudes are normalized scenario-wide: pooled values are
clamped to their [low, high] percentile range (default 10th/90th) and
rescaled to [0, out_max] (default 0.1).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .anatomy import AnatomicalDomain, Trajectory, classify_points, trajectory_chord
from .biomech import boundary_crossing_arclengths
from .synth import damping_coefficient, per_mass_stability_limit

# Anatomical nodes within this many spring lengths of the path axis are
# mapped onto sound nodes.
NODE_MAP_RADIUS_FACTOR = 1.5


class MappingError(ValueError):
    """Invalid mapping configuration or input."""


@dataclass(frozen=True)
class NormalizationSpec:
    low_percentile: float = 10.0
    high_percentile: float = 90.0
    out_max: float = 0.1

    def __post_init__(self):
        if not 0.0 <= self.low_percentile < self.high_percentile <= 100.0:
            raise MappingError("need 0 <= low_percentile < high_percentile <= 100")
        if self.out_max <= 0:
            raise MappingError("out_max must be > 0")


@dataclass(frozen=True)
class MappingConfig:
    spring_rest_length_L: float = 0.01       # m
    reference_frequency_f_ref: float = 220.0  # Hz
    normalization: NormalizationSpec = field(default_factory=NormalizationSpec)
    audio_rate: float = 44100.0              # Hz

    def __post_init__(self):
        if self.spring_rest_length_L <= 0:
            raise MappingError("spring_rest_length_L must be > 0")
        if not 20.0 < self.reference_frequency_f_ref < 2000.0:
            raise MappingError("reference_frequency_f_ref must be in (20, 2000) Hz")
        if self.audio_rate <= 0:
            raise MappingError("audio_rate must be > 0")


@dataclass
class SegmentedPath:
    """The 1D path coordinate system through the domain.

    Arc lengths are measured from the trajectory entry point.  ``segments``
    are the exact geometric class intervals (their lengths sum to the chord
    length); ``sound_node_positions`` are the discretized stations, one per
    spring length, placed at step midpoints.
    """

    p_origin: np.ndarray                       # (3,) m
    p_direction: np.ndarray                    # (3,) unit
    segments: tuple[tuple[int, float], ...]    # (class_id, length_m)
    sound_node_positions: np.ndarray           # (n_stations,) m along the path
    station_class_ids: np.ndarray              # (n_stations,) int
    node_map: dict[int, int]                   # anatomical node id -> station
    chord: tuple[float, float]                 # (s_start, s_end) m

    def __post_init__(self):
        if any(length <= 0 for _, length in self.segments):
            raise MappingError("segment lengths must be > 0")
        if (np.diff(self.sound_node_positions) <= 0).any():
            raise MappingError("sound node coordinates must be strictly increasing")
        total = sum(length for _, length in self.segments)
        chord_len = self.chord[1] - self.chord[0]
        if abs(total - chord_len) > 1e-9 * max(1.0, chord_len):
            raise MappingError("segment lengths must sum to the chord length")

    @property
    def n_stations(self) -> int:
        return int(self.sound_node_positions.shape[0])

    def segment_starts(self) -> np.ndarray:
        """Arc length at which each segment begins."""
        lengths = np.array([length for _, length in self.segments])
        return self.chord[0] + np.concatenate([[0.0], np.cumsum(lengths)[:-1]])


def project_to_path(domain: AnatomicalDomain, trajectory: Trajectory,
                    config: MappingConfig) -> SegmentedPath:
    """Project the domain onto the tool path (spatial reduction to 1D).

    Walks the path axis through the domain in steps of one spring length,
    creating one sound node per step at the step start and classifying it
    there (so a sound node and the grid plane feeding it always agree on the
    tissue class); consecutive equal-class spans merge into segments whose
    lengths are the exact geometric intersection lengths.  Every anatomical
    node within 1.5 spring lengths of the axis is mapped to its nearest
    sound node.
    """
    entry, direction = trajectory.entry, trajectory.dir
    s_start, s_end = trajectory_chord(domain, trajectory)
    spring_l = config.spring_rest_length_L

    crossings = boundary_crossing_arclengths(domain, trajectory)
    cuts = [s_start] + [s for s, _, _ in crossings] + [s_end]
    segments = []
    for a, b in zip(cuts[:-1], cuts[1:]):
        mid_class = int(classify_points(domain, entry + 0.5 * (a + b) * direction)[0])
        if segments and segments[-1][0] == mid_class:
            segments[-1][1] += b - a
        else:
            segments.append([mid_class, b - a])

    n_stations = int(np.floor((s_end - s_start) / spring_l + 1e-9))
    if n_stations < 1:
        raise MappingError("path through the domain is shorter than one spring length")
    station_s = s_start + np.arange(n_stations) * spring_l
    station_points = entry[None, :] + station_s[:, None] * direction[None, :]
    station_classes = classify_points(domain, station_points)

    offsets = domain.positions - entry
    s_proj = offsets @ direction
    r_perp = np.linalg.norm(offsets - s_proj[:, None] * direction, axis=1)
    within = r_perp <= NODE_MAP_RADIUS_FACTOR * spring_l + 1e-12
    nearest = np.clip(np.floor((s_proj - s_start) / spring_l + 0.5 + 1e-9).astype(int),
                      0, n_stations - 1)
    node_map = {int(nid): int(st)
                for nid, st in zip(domain.node_ids[within], nearest[within])}

    return SegmentedPath(
        p_origin=entry.copy(),
        p_direction=direction.copy(),
        segments=tuple((cid, float(length)) for cid, length in segments),
        sound_node_positions=station_s,
        station_class_ids=np.asarray(station_classes, dtype=int),
        node_map=node_map,
        chord=(s_start, s_end),
    )


@dataclass(frozen=True)
class MappedProperties:
    """Per-class oscillator parameters and the global stiffness scale."""

    masses: dict[int, float]        # class id -> kg
    stiffnesses: dict[int, float]   # class id -> N/m (already scaled)
    global_scale: float
    scale_limited_by_stability: bool = False

    def mass_of(self, class_id: int) -> float:
        return self.masses[class_id]

    def stiffness_of(self, class_id: int) -> float:
        return self.stiffnesses[class_id]


def map_properties(classes, config: MappingConfig,
                   max_springs_per_mass: int = 6,
                   damping_tau: float | None = None) -> MappedProperties:
    """Map tissue (density, Young's modulus) to oscillator (mass, stiffness).

    Lumps each class into a cube of one spring length L: m = rho * L^3 and
    raw axial stiffness K_raw = E * L (E * A / L with A = L^2).  One global
    scale s is applied to all stiffnesses so the softest class's
    single-oscillator frequency (1/2pi) sqrt(K/m) lands on the reference
    frequency; stiffness ratios between classes are therefore preserved
    exactly.  If the stiffest class would then break the integrator
    stability bound at the configured audio rate (assuming at most
    ``max_springs_per_mass`` attached springs), s is reduced to the largest
    stable value and a warning is emitted.  A configuration that cannot
    reach 20 Hz even at the largest stable scale is rejected.
    """
    classes = list(classes)
    if not classes:
        raise MappingError("map_properties needs at least one tissue class")
    spring_l = config.spring_rest_length_L
    if damping_tau is None:
        from .synth import DEFAULT_DAMPING_TAU_S
        damping_tau = DEFAULT_DAMPING_TAU_S

    masses = {c.id: c.density_rho * spring_l ** 3 for c in classes}
    raw_k = {c.id: c.youngs_modulus_E * spring_l for c in classes}

    ratios = {cid: raw_k[cid] / masses[cid] for cid in raw_k}
    softest = min(ratios, key=ratios.get)
    f_raw_min = np.sqrt(ratios[softest]) / (2.0 * np.pi)
    s_ref = (config.reference_frequency_f_ref / f_raw_min) ** 2

    dt = 1.0 / config.audio_rate
    s_stable = np.inf
    for cid in raw_k:
        z = damping_coefficient(masses[cid], damping_tau)
        limit = float(per_mass_stability_limit(dt, masses[cid], z))
        if limit <= 0:
            raise MappingError("damping alone exceeds the stability bound; "
                               "lower the damping or raise the audio rate")
        s_stable = min(s_stable, limit / (max_springs_per_mass * raw_k[cid]))

    limited = s_ref > s_stable
    if limited:
        scale = s_stable * (1.0 - 1e-9)
        f_min = np.sqrt(scale * ratios[softest]) / (2.0 * np.pi)
        if f_min < 20.0:
            raise MappingError(
                f"stability-infeasible configuration: largest stable scale puts the "
                f"softest class at {f_min:.1f} Hz (< 20 Hz audible floor)")
        warnings.warn(
            f"stiffness scale reduced from {s_ref:.3g} to {scale:.3g} to keep the "
            f"stiffest class inside the stability bound; softest class now at "
            f"{f_min:.1f} Hz instead of {config.reference_frequency_f_ref:.1f} Hz",
            RuntimeWarning, stacklevel=2)
    else:
        scale = s_ref

    stiffnesses = {cid: scale * k for cid, k in raw_k.items()}
    return MappedProperties(masses=masses, stiffnesses=stiffnesses,
                            global_scale=float(scale),
                            scale_limited_by_stability=bool(limited))


def normalize_displacements(norms: np.ndarray,
                            config: MappingConfig) -> np.ndarray:
    """Clamp pooled displacement magnitudes to their percentile range and
    rescale to [0, out_max].

    Percentiles are computed over the whole pooled array (all mapped nodes,
    all frames) so relative inter-node amplitude structure is preserved.  A
    degenerate pool (high percentile equal to low) maps to all zeros.
    """
    norms = np.asarray(norms, dtype=float)
    if norms.size == 0:
        raise MappingError("cannot normalize an empty series")
    if not np.isfinite(norms).all():
        raise MappingError("displacement norms must be finite")
    spec = config.normalization
    p_low, p_high = np.percentile(norms, [spec.low_percentile, spec.high_percentile])
    if p_high <= p_low:
        return np.zeros_like(norms)
    clamped = np.clip(norms, p_low, p_high)
    return (clamped - p_low) * (spec.out_max / (p_high - p_low))


def compute_excitation(normalized_norms: np.ndarray, node_ids: np.ndarray,
                       segmented_path: SegmentedPath,
                       properties: MappedProperties, config: MappingConfig,
                       frame_rate: float,
                       duration: float | None = None) -> np.ndarray:
    """Per-sound-node excitation force signals at audio rate.

    For each station, the normalized magnitudes of its mapped anatomical
    nodes are averaged, linearly interpolated from the trace frame rate to
    the audio rate (sample-accurate; zero-order hold would inject stair-step
    transients absent from the displacement data), and multiplied by the
    station class's stiffness: F = K * |u|.  Forces are non-negative by
    construction.

    ``normalized_norms`` has shape (n_frames, n_nodes) with columns aligned
    to ``node_ids``.  Returns shape (n_stations, n_samples).
    """
    if config.audio_rate < 2.0 * frame_rate:
        raise MappingError(f"audio_rate {config.audio_rate} Hz must be at least "
                           f"twice the trace frame rate {frame_rate} Hz")
    normalized = np.atleast_2d(np.asarray(normalized_norms, dtype=float))
    node_ids = np.asarray(node_ids)
    if normalized.shape[1] != node_ids.shape[0]:
        raise MappingError("normalized_norms columns must align with node_ids")
    n_frames = normalized.shape[0]
    if duration is None:
        duration = n_frames / frame_rate

    col_of = {int(nid): k for k, nid in enumerate(node_ids)}
    members: list[list[int]] = [[] for _ in range(segmented_path.n_stations)]
    for nid, st in segmented_path.node_map.items():
        if nid in col_of:
            members[st].append(col_of[nid])
    empty = [st for st, cols in enumerate(members) if not cols]
    if empty:
        raise MappingError(f"sound nodes {empty[:5]} have no mapped anatomical "
                           f"node in the trace (unmapped node)")

    frame_t = np.arange(n_frames) / frame_rate
    n_samples = int(round(duration * config.audio_rate))
    sample_t = np.arange(n_samples) / config.audio_rate

    forces = np.empty((segmented_path.n_stations, n_samples))
    for st, cols in enumerate(members):
        station_series = normalized[:, cols].mean(axis=1)
        k = properties.stiffness_of(int(segmented_path.station_class_ids[st]))
        forces[st] = k * np.interp(sample_t, frame_t, station_series)
    return forces
