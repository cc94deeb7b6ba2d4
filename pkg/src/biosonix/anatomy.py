"""Discretized anatomical domains: layered slabs and sphere-inclusion phantoms.

Geometry conventions used throughout the package:

* All lengths are meters, densities kg/m^3, moduli Pa.
* A tissue block occupies an axis-aligned box; ``z`` is the depth axis with
  ``z = 0`` at the surface where tools enter and ``z`` increasing into the
  tissue.  Layered geometries stack along ``z``.
* Nodes sit on a regular Cartesian grid with uniform spacing, box faces
  included.
* Every node belongs to exactly one tissue class.  Tie-breaks are
  deterministic: a point exactly on a layer interface belongs to the deeper
  layer, a point exactly on an inclusion surface belongs to the inclusion.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

# Absorbs float noise in grid/boundary arithmetic; far below any feature size.
BOUNDARY_TOL = 1e-9

# Unit-vector tolerance for trajectory directions.
DIRECTION_TOL = 1e-12


class DomainError(ValueError):
    """Invalid domain geometry or query."""


class TrajectoryMissError(DomainError):
    """Trajectory does not pass through the domain interior."""


class GeometryKind(enum.Enum):
    LAYERED = "layered"
    SPHERE_INCLUSION = "sphere_inclusion"


@dataclass(frozen=True)
class TissueClass:
    """Homogenized linear-elastic tissue description.

    ``poisson_nu`` is carried as configuration metadata only; the pipeline's
    mechanics do not depend on it.  ``puncture_spike_gain`` scales the
    interface-crossing transient of the built-in insertion model.
    """

    id: int
    name: str
    density_rho: float            # kg/m^3
    youngs_modulus_E: float       # Pa
    poisson_nu: float = 0.4
    puncture_spike_gain: float = 1.0

    def __post_init__(self):
        if self.density_rho <= 0:
            raise DomainError(f"class {self.name!r}: density_rho must be > 0")
        if self.youngs_modulus_E <= 0:
            raise DomainError(f"class {self.name!r}: youngs_modulus_E must be > 0")
        if not 0.0 <= self.poisson_nu < 0.5:
            raise DomainError(f"class {self.name!r}: poisson_nu must be in [0, 0.5)")
        if self.puncture_spike_gain < 0:
            raise DomainError(f"class {self.name!r}: puncture_spike_gain must be >= 0")


@dataclass(frozen=True)
class LayerSpec:
    """Parallel layers stacked along depth: (class_id, thickness_m) per layer."""

    layers: tuple[tuple[int, float], ...]
    # Cumulative depth of each layer's lower face, length == len(layers).
    boundaries: tuple[float, ...]


@dataclass(frozen=True)
class SphereSpec:
    medium_class_id: int
    inclusion_class_id: int
    center: tuple[float, float, float]
    radius: float


@dataclass
class AnatomicalDomain:
    """A box of grid nodes partitioned into tissue-class subdomains.

    Immutable after construction; safe to share read-only across concurrent
    scenario runs.
    """

    node_ids: np.ndarray          # (n,) int
    positions: np.ndarray         # (n, 3) m
    class_ids: np.ndarray         # (n,) int
    classes: tuple[TissueClass, ...]
    bounds: np.ndarray            # (2, 3) m, rows = (lo, hi)
    node_spacing: float           # m
    geometry_kind: GeometryKind
    layer_spec: LayerSpec | None = None
    sphere_spec: SphereSpec | None = None
    _class_by_id: dict[int, TissueClass] = field(init=False, repr=False)

    def __post_init__(self):
        ids = [c.id for c in self.classes]
        if len(set(ids)) != len(ids):
            raise DomainError("tissue class ids must be unique within a scenario")
        self._class_by_id = {c.id: c for c in self.classes}
        if self.node_ids.shape[0] < 2:
            raise DomainError("domain needs at least 2 nodes")
        if self.node_spacing <= 0:
            raise DomainError("node_spacing must be > 0")
        unknown = set(np.unique(self.class_ids)) - set(ids)
        if unknown:
            raise DomainError(f"nodes reference unknown class ids {sorted(unknown)}")
        lo, hi = self.bounds
        if (self.positions < lo - BOUNDARY_TOL).any() or (self.positions > hi + BOUNDARY_TOL).any():
            raise DomainError("node positions must lie inside the domain bounds")

    @property
    def n_nodes(self) -> int:
        return int(self.node_ids.shape[0])

    def tissue_class(self, class_id: int) -> TissueClass:
        try:
            return self._class_by_id[class_id]
        except KeyError:
            raise DomainError(f"unknown tissue class id {class_id}") from None

    def youngs_modulus_of_nodes(self) -> np.ndarray:
        """Per-node Young's modulus in Pa, aligned with ``node_ids``."""
        e_by_id = {c.id: c.youngs_modulus_E for c in self.classes}
        return np.array([e_by_id[int(c)] for c in self.class_ids])

    def class_counts(self) -> dict[int, int]:
        ids, counts = np.unique(self.class_ids, return_counts=True)
        return {int(i): int(n) for i, n in zip(ids, counts)}


@dataclass(frozen=True)
class Trajectory:
    """Straight constant-velocity tool path: entry point, unit direction,
    speed (m/s) and insertion duration (s)."""

    entry_point: tuple[float, float, float]
    direction: tuple[float, float, float]
    speed_v: float
    duration: float

    def __post_init__(self):
        d = np.asarray(self.direction, dtype=float)
        if abs(float(np.linalg.norm(d)) - 1.0) > DIRECTION_TOL:
            raise DomainError("trajectory direction must be a unit vector (|d| = 1 within 1e-12)")
        if self.speed_v <= 0:
            raise DomainError("trajectory speed_v must be > 0")
        if self.duration <= 0:
            raise DomainError("trajectory duration must be > 0")

    @property
    def entry(self) -> np.ndarray:
        return np.asarray(self.entry_point, dtype=float)

    @property
    def dir(self) -> np.ndarray:
        return np.asarray(self.direction, dtype=float)


def _axis_count(extent: float, spacing: float, what: str) -> int:
    ratio = extent / spacing
    n = round(ratio)
    if n < 1 or abs(ratio - n) > 1e-6 * max(1.0, ratio):
        raise DomainError(f"node_spacing must divide the {what} ({extent} / {spacing})")
    return int(n) + 1


def _grid_positions(side: float, depth: float, spacing: float) -> np.ndarray:
    nx = _axis_count(side, spacing, "cross-section side")
    nz = _axis_count(depth, spacing, "total depth")
    xs = np.arange(nx) * spacing
    zs = np.arange(nz) * spacing
    gx, gy, gz = np.meshgrid(xs, xs, zs, indexing="ij")
    return np.column_stack([gx.ravel(), gy.ravel(), gz.ravel()])


def _classify_layered_depths(depths: np.ndarray, boundaries: np.ndarray,
                             layer_class_ids: np.ndarray) -> np.ndarray:
    # Interface ties go to the deeper layer; the bottom face stays in the
    # last layer.
    idx = np.searchsorted(boundaries, depths + BOUNDARY_TOL, side="left")
    idx = np.minimum(idx, len(boundaries) - 1)
    return layer_class_ids[idx]


def _classify_sphere(points: np.ndarray, spec: SphereSpec) -> np.ndarray:
    d = np.linalg.norm(np.atleast_2d(points) - np.asarray(spec.center), axis=1)
    inside = d <= spec.radius + BOUNDARY_TOL
    return np.where(inside, spec.inclusion_class_id, spec.medium_class_id)


def build_layered_domain(layers: list[tuple[int, float]], cross_section_side: float,
                         node_spacing: float,
                         classes: list[TissueClass]) -> AnatomicalDomain:
    """Build a box of parallel tissue layers stacked along depth.

    ``layers`` lists (class_id, thickness_m) from the surface downward.  The
    box is ``side x side x sum(thickness)`` with nodes on a regular grid of
    the given spacing.  Node class is determined by the layer band containing
    the node's depth; a node exactly on an interface joins the deeper layer.
    """
    if not layers:
        raise DomainError("layer list must not be empty")
    if node_spacing <= 0:
        raise DomainError("node_spacing must be > 0")
    known = {c.id for c in classes}
    for i, (cid, thickness) in enumerate(layers):
        if cid not in known:
            raise DomainError(f"layer {i} references unknown class id {cid}")
        if thickness <= 0:
            raise DomainError(f"layer {i} thickness must be > 0")
        if thickness < node_spacing - BOUNDARY_TOL:
            raise DomainError(
                f"layer {i} thickness {thickness} is smaller than node_spacing "
                f"{node_spacing}; the layer would contain no grid plane")

    thicknesses = np.array([t for _, t in layers], dtype=float)
    boundaries = np.cumsum(thicknesses)
    depth = float(boundaries[-1])
    positions = _grid_positions(cross_section_side, depth, node_spacing)
    layer_class_ids = np.array([cid for cid, _ in layers], dtype=int)
    class_ids = _classify_layered_depths(positions[:, 2], boundaries, layer_class_ids)

    spec = LayerSpec(layers=tuple((int(c), float(t)) for c, t in layers),
                     boundaries=tuple(float(b) for b in boundaries))
    bounds = np.array([[0.0, 0.0, 0.0],
                       [cross_section_side, cross_section_side, depth]])
    return AnatomicalDomain(
        node_ids=np.arange(positions.shape[0]),
        positions=positions,
        class_ids=class_ids,
        classes=tuple(classes),
        bounds=bounds,
        node_spacing=float(node_spacing),
        geometry_kind=GeometryKind.LAYERED,
        layer_spec=spec,
    )


def build_inclusion_domain(medium: int, inclusion: int,
                           sphere_center: tuple[float, float, float],
                           sphere_radius: float, box_side: float,
                           node_spacing: float,
                           classes: list[TissueClass]) -> AnatomicalDomain:
    """Build a homogeneous cube of ``medium`` with a spherical ``inclusion``.

    Nodes with ``|position - center| <= radius`` take the inclusion class.
    The sphere must lie fully inside the box and have radius of at least
    twice the node spacing so it captures at least one grid node.
    """
    known = {c.id for c in classes}
    if medium not in known:
        raise DomainError(f"unknown medium class id {medium}")
    if inclusion not in known:
        raise DomainError(f"unknown inclusion class id {inclusion}")
    if sphere_radius < 2.0 * node_spacing:
        raise DomainError("sphere radius must be >= 2 * node_spacing")
    center = np.asarray(sphere_center, dtype=float)
    if (center - sphere_radius < -BOUNDARY_TOL).any() or \
            (center + sphere_radius > box_side + BOUNDARY_TOL).any():
        raise DomainError("sphere must lie fully inside the box")

    positions = _grid_positions(box_side, box_side, node_spacing)
    spec = SphereSpec(medium_class_id=int(medium), inclusion_class_id=int(inclusion),
                      center=tuple(float(c) for c in center), radius=float(sphere_radius))
    class_ids = _classify_sphere(positions, spec)
    if not (class_ids == inclusion).any():
        raise DomainError("sphere captures no grid node")

    bounds = np.array([[0.0, 0.0, 0.0], [box_side, box_side, box_side]])
    return AnatomicalDomain(
        node_ids=np.arange(positions.shape[0]),
        positions=positions,
        class_ids=class_ids,
        classes=tuple(classes),
        bounds=bounds,
        node_spacing=float(node_spacing),
        geometry_kind=GeometryKind.SPHERE_INCLUSION,
        sphere_spec=spec,
    )


def classify_points(domain: AnatomicalDomain, points: np.ndarray) -> np.ndarray:
    """Vectorized :func:`classify_point` for an (n, 3) array of points."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    lo, hi = domain.bounds
    if (pts < lo - BOUNDARY_TOL).any() or (pts > hi + BOUNDARY_TOL).any():
        raise DomainError("point outside domain bounds")
    if domain.geometry_kind is GeometryKind.LAYERED:
        spec = domain.layer_spec
        boundaries = np.asarray(spec.boundaries)
        layer_ids = np.array([cid for cid, _ in spec.layers], dtype=int)
        return _classify_layered_depths(pts[:, 2], boundaries, layer_ids)
    return _classify_sphere(pts, domain.sphere_spec)


def classify_point(domain: AnatomicalDomain, point) -> int:
    """Tissue class id of the subdomain containing ``point``.

    Uses the same tie-breaking as the domain builders, so for every node
    ``classify_point(domain, node position) == node class``.
    """
    return int(classify_points(domain, np.asarray(point, dtype=float))[0])


def ray_box_chord(entry: np.ndarray, direction: np.ndarray,
                  bounds: np.ndarray) -> tuple[float, float]:
    """Arc-length interval [s_enter, s_exit] of the ray inside the box.

    Arc length is measured from ``entry`` along ``direction``; ``s_enter`` is
    clipped at 0 (the tool cannot act behind its entry point).  Raises
    :class:`TrajectoryMissError` when the forward ray misses the interior.
    """
    lo, hi = bounds
    s_min, s_max = -np.inf, np.inf
    for ax in range(3):
        d = direction[ax]
        if abs(d) < 1e-15:
            if entry[ax] < lo[ax] - BOUNDARY_TOL or entry[ax] > hi[ax] + BOUNDARY_TOL:
                raise TrajectoryMissError("trajectory misses the domain")
            continue
        t0 = (lo[ax] - entry[ax]) / d
        t1 = (hi[ax] - entry[ax]) / d
        if t0 > t1:
            t0, t1 = t1, t0
        s_min = max(s_min, t0)
        s_max = min(s_max, t1)
    s_min = max(s_min, 0.0)
    if not np.isfinite(s_max) or s_max <= s_min + BOUNDARY_TOL:
        raise TrajectoryMissError("trajectory misses the domain interior")
    return float(s_min), float(s_max)


def trajectory_chord(domain: AnatomicalDomain,
                     trajectory: Trajectory) -> tuple[float, float]:
    """Arc-length span of ``trajectory`` inside ``domain`` (see ray_box_chord)."""
    return ray_box_chord(trajectory.entry, trajectory.dir, domain.bounds)
