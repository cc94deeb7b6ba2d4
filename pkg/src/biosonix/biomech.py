"""Per-node displacement traces from tool-tissue interaction.

Two acquisition tracks feed the rest of the pipeline with the same
:class:`DisplacementTrace` type:

* ingestion of externally computed traces from CSV (:func:`load_trace`), and
* a built-in phenomenological needle-insertion model
  (:func:`simulate_insertion`).

The built-in model replaces a contact-mechanics solver with a closed-form
kernel that keeps the three phenomena the sonification consumes: compression
inversely proportional to tissue stiffness, spatial locality around the tool
tip, and decaying puncture transients when the tip crosses an interface
between tissue classes.

Trace CSV format: header ``time_s,node_id,ux_m,uy_m,uz_m``, rows sorted by
(time, node_id).  Companion nodes CSV: ``node_id,x_m,y_m,z_m,class_id``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .anatomy import (
    BOUNDARY_TOL,
    AnatomicalDomain,
    Trajectory,
    TrajectoryMissError,
    classify_point,
    trajectory_chord,
)

# Exponential decay constant of puncture transients, seconds.
SPIKE_DECAY_TAU = 0.2


class TraceError(ValueError):
    """Invalid displacement trace data."""


class TraceFormatError(TraceError):
    """Malformed trace file."""


class UnknownNodeError(TraceError):
    """Trace references a node id absent from the domain."""


class NonFiniteValueError(TraceError):
    """Trace contains NaN or Inf displacement values."""


class TraceSource(enum.Enum):
    INGESTED = "ingested"
    SIMULATED = "simulated"


@dataclass
class DisplacementTrace:
    """Time-major per-node 3D displacement vectors at a fixed frame rate."""

    frame_rate: float             # Hz
    node_ids: np.ndarray          # (n_nodes,) int
    frames: np.ndarray            # (n_frames, n_nodes, 3) m
    source: TraceSource

    def __post_init__(self):
        if self.frame_rate <= 0:
            raise TraceError("frame_rate must be > 0")
        if self.frames.ndim != 3 or self.frames.shape[2] != 3:
            raise TraceError("frames must have shape (n_frames, n_nodes, 3)")
        if self.frames.shape[0] < 2:
            raise TraceError("a trace needs at least 2 frames")
        if self.frames.shape[1] != self.node_ids.shape[0]:
            raise TraceError("frames and node_ids disagree on node count")
        if not np.isfinite(self.frames).all():
            raise NonFiniteValueError("trace contains non-finite displacements")

    @property
    def n_frames(self) -> int:
        return int(self.frames.shape[0])

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.n_frames) / self.frame_rate

    def norms(self) -> np.ndarray:
        """Displacement magnitudes, shape (n_frames, n_nodes)."""
        return np.linalg.norm(self.frames, axis=2)


@dataclass(frozen=True)
class InsertionParams:
    """Parameters of the built-in insertion model.

    ``kernel_sigma`` controls locality around the tip along the path,
    ``influence_radius_R`` transverse locality around the path line.  The
    100 Hz default frame rate over-samples all sub-20 Hz mechanical
    envelopes.

    ``texture_gain`` scales a zero-mean frame-rate micro-texture multiplied
    onto the displacement magnitudes, emulating the stick-slip jitter real
    tool-tissue displacement data carries.  Each node gets an independent
    sequence, fully determined by ``texture_seed``; the texture is
    mean-preserving and independent of the tip force, so linearity in F0 is
    exact.  Set the gain to 0 for the bare smooth kernel.
    """

    nominal_tip_force_F0: float = 1.0     # N
    kernel_sigma: float = 0.02            # m
    influence_radius_R: float = 0.03      # m
    frame_rate: float = 100.0             # Hz
    texture_gain: float = 0.3             # dimensionless, in [0, 1)
    texture_seed: int = 0

    def __post_init__(self):
        for name in ("nominal_tip_force_F0", "kernel_sigma",
                     "influence_radius_R", "frame_rate"):
            if getattr(self, name) <= 0:
                raise TraceError(f"InsertionParams.{name} must be > 0")
        if not 0.0 <= self.texture_gain < 1.0:
            raise TraceError("InsertionParams.texture_gain must be in [0, 1)")


def boundary_crossing_arclengths(
        domain: AnatomicalDomain,
        trajectory: Trajectory) -> list[tuple[float, int, int]]:
    """Arc lengths (from the entry point) where the path changes tissue class.

    Returns (s_m, from_class_id, to_class_id) tuples sorted ascending,
    restricted to the chord the trajectory cuts through the domain.
    """
    entry, direction = trajectory.entry, trajectory.dir
    s_start, s_end = trajectory_chord(domain, trajectory)

    candidates: list[float] = []
    if domain.layer_spec is not None:
        dz = direction[2]
        if abs(dz) > 1e-15:
            # Internal interfaces only; the bottom face is a domain boundary.
            for b in domain.layer_spec.boundaries[:-1]:
                candidates.append((b - entry[2]) / dz)
    if domain.sphere_spec is not None:
        spec = domain.sphere_spec
        p = np.asarray(spec.center) - entry
        b = float(np.dot(p, direction))
        disc = b * b - (float(np.dot(p, p)) - spec.radius ** 2)
        if disc > 0:
            root = np.sqrt(disc)
            candidates.extend([b - root, b + root])

    eps = 1e-7  # m; step off the interface to classify each side
    crossings = []
    for s in sorted(candidates):
        if not (s_start + eps < s < s_end - eps):
            continue
        before = classify_point(domain, entry + (s - eps) * direction)
        after = classify_point(domain, entry + (s + eps) * direction)
        if before != after:
            crossings.append((float(s), before, after))
    return crossings


def boundary_crossing_times(
        domain: AnatomicalDomain,
        trajectory: Trajectory) -> list[tuple[float, int, int]]:
    """Times (s) at which the tool tip crosses tissue interfaces.

    At constant speed the crossing time is the interface's cumulative depth
    along the path divided by the speed.  Single-class paths yield an empty
    list.  This is analytic, independent of the displacement model, and
    serves as the timing oracle for the rest of the pipeline.
    """
    return [(s / trajectory.speed_v, a, b)
            for s, a, b in boundary_crossing_arclengths(domain, trajectory)]


def _radial_directions(offsets: np.ndarray, r_perp: np.ndarray,
                       axial: np.ndarray) -> np.ndarray:
    """Unit vectors pointing radially away from the path line; axial for
    on-axis nodes."""
    dirs = np.empty_like(offsets)
    on_axis = r_perp < 1e-12
    safe = np.where(on_axis, 1.0, r_perp)
    dirs[:] = offsets / safe[:, None]
    dirs[on_axis] = axial
    return dirs


def simulate_insertion(domain: AnatomicalDomain, trajectory: Trajectory,
                       params: InsertionParams,
                       node_radius: float | None = None) -> DisplacementTrace:
    """Generate a displacement trace for a straight constant-speed insertion.

    For each frame after entry, a node within reach of the path receives a
    displacement magnitude

        (F0 / (E * L)) * exp(-d^2 / (2 sigma^2)) * exp(-r_perp^2 / (2 R^2))

    where E is the node's class modulus, L the grid spacing, r_perp the
    distance from node to the path line, and d the distance from the node to
    the inserted tool shaft (the entry-to-tip segment).  Tissue ahead of the
    tip is reached through the sigma kernel; tissue the shaft has passed
    through stays compressed until the end of the insertion.  A puncture
    transient is added when the tip crosses the interface nearest to the
    node, of peak amplitude

        spike_gain * |E_a - E_b| / (E_a + E_b) * (F0 / (E * L))

    decaying with time constant 0.2 s and localized like the main kernel.
    A shared zero-mean micro-texture (see :class:`InsertionParams`)
    multiplies the magnitudes frame by frame.  Displacement direction is
    radial away from the path line (axial for on-axis nodes).  The first
    frame (t = 0, tip still at the surface) is zero for all nodes.

    ``node_radius`` restricts the trace to nodes within that distance of the
    path line; ``None`` keeps every domain node.
    """
    entry, direction = trajectory.entry, trajectory.dir
    s_start, s_end = trajectory_chord(domain, trajectory)
    if s_end - max(s_start, 0.0) <= BOUNDARY_TOL:
        raise TrajectoryMissError("zero-length path through the domain")

    n_frames = int(round(params.frame_rate * trajectory.duration))
    if n_frames < 2:
        raise TraceError("duration * frame_rate must cover at least 2 frames")
    times = np.arange(n_frames) / params.frame_rate

    offsets = domain.positions - entry
    s_proj = offsets @ direction
    perp = offsets - s_proj[:, None] * direction
    r_perp = np.linalg.norm(perp, axis=1)

    if node_radius is not None:
        keep = r_perp <= node_radius + BOUNDARY_TOL
        if not keep.any():
            raise TraceError("node_radius keeps no nodes")
    else:
        keep = np.ones(domain.n_nodes, dtype=bool)
    node_ids = domain.node_ids[keep]
    s_proj = s_proj[keep]
    r_perp = r_perp[keep]
    perp = perp[keep]

    e_mod = domain.youngs_modulus_of_nodes()[keep]
    amplitude = params.nominal_tip_force_F0 / (e_mod * domain.node_spacing)
    sigma2 = 2.0 * params.kernel_sigma ** 2
    big_r2 = 2.0 * params.influence_radius_R ** 2
    transverse = np.exp(-r_perp ** 2 / big_r2)

    # Tip arc length per frame, clamped at the far end of the chord.  The
    # axial excess is the distance past either end of the inserted shaft.
    tip_s = np.minimum(trajectory.speed_v * times, s_end)
    excess = np.maximum(s_proj[None, :] - tip_s[:, None], 0.0) \
        + np.maximum(-s_proj, 0.0)[None, :]
    d2 = excess ** 2 + (r_perp ** 2)[None, :]
    magnitude = amplitude[None, :] * np.exp(-d2 / sigma2) * transverse[None, :]

    crossings = boundary_crossing_arclengths(domain, trajectory)
    if crossings:
        e_by_id = {c.id: c.youngs_modulus_E for c in domain.classes}
        gain_by_id = {c.id: c.puncture_spike_gain for c in domain.classes}
        s_cross = np.array([s for s, _, _ in crossings])
        contrast = np.array([abs(e_by_id[a] - e_by_id[b]) / (e_by_id[a] + e_by_id[b])
                             for _, a, b in crossings])
        # Each node listens to the crossing nearest to it along the path.
        nearest = np.argmin(np.abs(s_proj[:, None] - s_cross[None, :]), axis=1)
        ds = s_proj - s_cross[nearest]
        node_gain = np.array([gain_by_id[int(c)] for c in domain.class_ids[keep]])
        peak = (node_gain * contrast[nearest] * amplitude
                * np.exp(-(ds ** 2 + r_perp ** 2) / sigma2) * transverse)
        t_cross = (s_cross / trajectory.speed_v)[nearest]
        dt_after = times[:, None] - t_cross[None, :]
        magnitude += np.where(dt_after >= 0,
                              peak[None, :] * np.exp(-np.maximum(dt_after, 0.0)
                                                     / SPIKE_DECAY_TAU),
                              0.0)

    if params.texture_gain > 0:
        # One-sided dips: micro-release events below the smooth compression
        # level.  Dips survive the downstream percentile clamp (which cuts
        # tops), so every node keeps carrying frame-rate content.
        rng = np.random.default_rng(params.texture_seed)
        magnitude *= 1.0 - params.texture_gain * rng.uniform(
            0.0, 1.0, magnitude.shape)

    magnitude[0, :] = 0.0
    dirs = _radial_directions(perp, r_perp, direction)
    frames = magnitude[:, :, None] * dirs[None, :, :]
    return DisplacementTrace(frame_rate=params.frame_rate, node_ids=node_ids,
                             frames=frames, source=TraceSource.SIMULATED)


def save_trace(trace: DisplacementTrace, path) -> None:
    """Write a trace CSV (see module docstring for the format)."""
    times = trace.times
    with open(path, "w", newline="\n") as f:
        f.write("time_s,node_id,ux_m,uy_m,uz_m\n")
        order = np.argsort(trace.node_ids, kind="stable")
        ids = trace.node_ids[order]
        for k in range(trace.n_frames):
            t = repr(float(times[k]))
            frame = trace.frames[k][order]
            for nid, (ux, uy, uz) in zip(ids, frame):
                f.write(f"{t},{int(nid)},{ux!r},{uy!r},{uz!r}\n")


def save_nodes_csv(domain: AnatomicalDomain, path) -> None:
    """Write the companion nodes CSV: node_id,x_m,y_m,z_m,class_id."""
    with open(path, "w", newline="\n") as f:
        f.write("node_id,x_m,y_m,z_m,class_id\n")
        for nid, pos, cid in zip(domain.node_ids, domain.positions, domain.class_ids):
            f.write(f"{int(nid)},{pos[0]!r},{pos[1]!r},{pos[2]!r},{int(cid)}\n")


def load_trace(path, domain: AnatomicalDomain) -> DisplacementTrace:
    """Load and validate a trace CSV against ``domain``.

    Rejects malformed rows, node ids absent from the domain, non-uniform
    frame spacing (tolerance 1e-9 s) and non-finite values.
    """
    with open(path, "r") as f:
        header = f.readline().strip()
        if header != "time_s,node_id,ux_m,uy_m,uz_m":
            raise TraceFormatError(f"unexpected trace header {header!r}")
        try:
            data = np.loadtxt(f, delimiter=",", ndmin=2)
        except ValueError as exc:
            raise TraceFormatError(f"malformed trace row: {exc}") from exc
    if data.size == 0:
        raise TraceFormatError("trace file has no data rows")
    if data.shape[1] != 5:
        raise TraceFormatError(f"expected 5 columns, got {data.shape[1]}")

    times_col = data[:, 0]
    ids_col = data[:, 1]
    if not np.isfinite(times_col).all() or not np.isfinite(ids_col).all():
        raise TraceFormatError("non-finite time or node id")
    if not np.isfinite(data[:, 2:]).all():
        raise NonFiniteValueError("trace contains NaN/Inf displacement values")

    ids_int = ids_col.astype(int)
    if (ids_int != ids_col).any():
        raise TraceFormatError("node ids must be integers")
    unknown = set(np.unique(ids_int)) - set(int(i) for i in domain.node_ids)
    if unknown:
        raise UnknownNodeError(f"trace references unknown node ids {sorted(unknown)[:5]}")

    frame_times, first_index = np.unique(times_col, return_index=True)
    if frame_times.shape[0] < 2:
        raise TraceFormatError("a trace needs at least 2 frames")
    if np.any(np.diff(first_index) <= 0) or not np.all(np.diff(times_col) >= 0):
        raise TraceFormatError("rows must be sorted by (time, node_id)")
    dts = np.diff(frame_times)
    if np.abs(dts - dts[0]).max() > 1e-9:
        raise TraceFormatError("non-uniform frame spacing (tolerance 1e-9 s)")

    n_frames = frame_times.shape[0]
    per_frame = times_col.shape[0] // n_frames
    if per_frame * n_frames != times_col.shape[0]:
        raise TraceFormatError("inconsistent node count across frames")
    ids_by_frame = ids_int.reshape(n_frames, per_frame)
    if (ids_by_frame != ids_by_frame[0]).any():
        raise TraceFormatError("node ordering differs across frames")
    if np.unique(ids_by_frame[0]).shape[0] != per_frame:
        raise TraceFormatError("duplicate node id within a frame")

    frames = data[:, 2:].reshape(n_frames, per_frame, 3)
    return DisplacementTrace(frame_rate=float(1.0 / dts[0]),
                             node_ids=ids_by_frame[0].copy(),
                             frames=frames, source=TraceSource.INGESTED)
