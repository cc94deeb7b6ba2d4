"""Scenario configuration (JSON) and pipeline assembly.

A scenario file fully describes one run: the tissue-class table, domain
geometry, tool trajectory, insertion-model parameters, mapping parameters,
sound-network configuration and analysis settings.  Field names carry
explicit units (``thickness_m``, ``E_pa``) to keep unit bugs out of config
files.  ``parse(serialize(config)) == config`` holds exactly.

:func:`assemble` runs the front half of the pipeline (domain -> displacement
trace -> path projection -> properties -> normalized magnitudes ->
excitation forces) and bundles everything a renderer or experiment needs.
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass, field

import numpy as np

from . import anatomy, biomech, mapping, synth
from .anatomy import AnatomicalDomain, TissueClass, Trajectory
from .biomech import DisplacementTrace, InsertionParams
from .mapping import MappedProperties, MappingConfig, NormalizationSpec, SegmentedPath
from .synth import Driver, Listener, MassSpringNetwork

SCHEMA_VERSION = 1

# Audible/stability floor for the synthesis rate; trace rates are ~100 Hz so
# anything below this is either inaudible or dangerously undersampled.
MIN_AUDIO_RATE_HZ = 8000.0


class ConfigError(ValueError):
    """Invalid scenario configuration; the message names the field path."""

    def __init__(self, path: str, message: str):
        self.path = path
        super().__init__(f"{path}: {message}")


@dataclass(frozen=True)
class GeometryConfig:
    kind: str                      # "layered" | "sphere_inclusion"
    node_spacing_m: float
    cross_section_side_m: float | None = None
    layers: tuple[tuple[int, float], ...] | None = None
    box_side_m: float | None = None
    medium_class_id: int | None = None
    inclusion_class_id: int | None = None
    sphere_center_m: tuple[float, float, float] | None = None
    sphere_radius_m: float | None = None


@dataclass(frozen=True)
class TrajectoryConfig:
    entry_m: tuple[float, float, float]
    direction: tuple[float, float, float]
    speed_m_s: float
    duration_s: float


@dataclass(frozen=True)
class InsertionConfig:
    tip_force_n: float = 1.0
    kernel_sigma_m: float = 0.02
    influence_radius_m: float = 0.03
    frame_rate_hz: float = 100.0
    texture_gain: float = 0.3
    texture_seed: int = 0
    # Nodes farther than this from the path line are left out of the trace;
    # None keeps every domain node (large files).
    trace_radius_m: float | None = 0.03


@dataclass(frozen=True)
class MappingSection:
    spring_rest_length_m: float = 0.01
    reference_frequency_hz: float = 220.0
    norm_low_percentile: float = 10.0
    norm_high_percentile: float = 90.0
    norm_out_max: float = 0.1
    audio_rate_hz: float = 44100.0


@dataclass(frozen=True)
class SynthSection:
    topology: str = "string"       # "string" | "lattice"
    lattice_width: int = 3
    damping_tau_s: float = 0.5
    normalize: bool = True
    drivers: str = "all"           # "all" | "sonic_area"
    listeners: str | tuple[int, ...] = "default"


@dataclass(frozen=True)
class AnalysisSection:
    stft_window: int = 2048
    stft_hop: int = 512
    envelope_rate_hz: float = 100.0
    detect_k_sigma: float = 3.0
    detect_smoothing_s: float = 0.2
    merge_window_s: float = 0.3


@dataclass(frozen=True)
class ScenarioConfig:
    classes: tuple[TissueClass, ...]
    geometry: GeometryConfig
    trajectory: TrajectoryConfig
    insertion: InsertionConfig = field(default_factory=InsertionConfig)
    mapping: MappingSection = field(default_factory=MappingSection)
    synth: SynthSection = field(default_factory=SynthSection)
    analysis: AnalysisSection = field(default_factory=AnalysisSection)
    target_class_id: int | None = None
    sonic_area_radius_m: float | None = None
    schema_version: int = SCHEMA_VERSION


# ---------------------------------------------------------------------------
# parsing / serialization

def _get(d: dict, key: str, path: str, required: bool = True, default=None):
    if key not in d:
        if required:
            raise ConfigError(f"{path}.{key}", "missing required field")
        return default
    return d[key]


def _num(d: dict, key: str, path: str, *, positive: bool = False,
         required: bool = True, default=None):
    val = _get(d, key, path, required, default)
    if val is default and not required:
        return default
    if not isinstance(val, (int, float)) or isinstance(val, bool):
        raise ConfigError(f"{path}.{key}", f"expected a number, got {val!r}")
    if positive and val <= 0:
        raise ConfigError(f"{path}.{key}", "must be > 0")
    return float(val)


def _int(d: dict, key: str, path: str, *, required: bool = True, default=None):
    val = _get(d, key, path, required, default)
    if val is default and not required:
        return default
    if not isinstance(val, int) or isinstance(val, bool):
        raise ConfigError(f"{path}.{key}", f"expected an integer, got {val!r}")
    return int(val)


def _vec3(d: dict, key: str, path: str) -> tuple[float, float, float]:
    val = _get(d, key, path)
    if not isinstance(val, (list, tuple)) or len(val) != 3 or \
            not all(isinstance(x, (int, float)) and not isinstance(x, bool) for x in val):
        raise ConfigError(f"{path}.{key}", "expected a list of 3 numbers")
    return tuple(float(x) for x in val)


def _parse_classes(raw, path: str) -> tuple[TissueClass, ...]:
    if not isinstance(raw, list) or not raw:
        raise ConfigError(path, "expected a non-empty list of tissue classes")
    classes = []
    seen = set()
    for i, entry in enumerate(raw):
        p = f"{path}[{i}]"
        if not isinstance(entry, dict):
            raise ConfigError(p, "expected an object")
        cid = _int(entry, "id", p)
        if cid in seen:
            raise ConfigError(f"{p}.id", f"duplicate class id {cid}")
        seen.add(cid)
        name = _get(entry, "name", p)
        if not isinstance(name, str) or not name:
            raise ConfigError(f"{p}.name", "expected a non-empty string")
        rho = _num(entry, "rho_kg_m3", p, positive=True)
        e_pa = _num(entry, "E_pa", p, positive=True)
        nu = _num(entry, "nu", p, required=False, default=0.4)
        if not 0.0 <= nu < 0.5:
            raise ConfigError(f"{p}.nu", "must be in [0, 0.5)")
        gain = _num(entry, "puncture_spike_gain", p, required=False, default=1.0)
        if gain < 0:
            raise ConfigError(f"{p}.puncture_spike_gain", "must be >= 0")
        classes.append(TissueClass(id=cid, name=name, density_rho=rho,
                                   youngs_modulus_E=e_pa, poisson_nu=nu,
                                   puncture_spike_gain=gain))
    return tuple(classes)


def _parse_geometry(raw, path: str, class_ids: set[int]) -> GeometryConfig:
    if not isinstance(raw, dict):
        raise ConfigError(path, "expected an object")
    kind = _get(raw, "kind", path)
    spacing = _num(raw, "node_spacing_m", path, positive=True)
    if kind == "layered":
        side = _num(raw, "cross_section_side_m", path, positive=True)
        layers_raw = _get(raw, "layers", path)
        if not isinstance(layers_raw, list) or not layers_raw:
            raise ConfigError(f"{path}.layers", "expected a non-empty list")
        layers = []
        for i, entry in enumerate(layers_raw):
            p = f"{path}.layers[{i}]"
            if not isinstance(entry, dict):
                raise ConfigError(p, "expected an object")
            cid = _int(entry, "class_id", p)
            if cid not in class_ids:
                raise ConfigError(f"{p}.class_id", f"unknown class id {cid}")
            layers.append((cid, _num(entry, "thickness_m", p, positive=True)))
        return GeometryConfig(kind=kind, node_spacing_m=spacing,
                              cross_section_side_m=side, layers=tuple(layers))
    if kind == "sphere_inclusion":
        medium = _int(raw, "medium_class_id", path)
        inclusion = _int(raw, "inclusion_class_id", path)
        for label, cid in (("medium_class_id", medium), ("inclusion_class_id", inclusion)):
            if cid not in class_ids:
                raise ConfigError(f"{path}.{label}", f"unknown class id {cid}")
        return GeometryConfig(
            kind=kind, node_spacing_m=spacing,
            box_side_m=_num(raw, "box_side_m", path, positive=True),
            medium_class_id=medium, inclusion_class_id=inclusion,
            sphere_center_m=_vec3(raw, "sphere_center_m", path),
            sphere_radius_m=_num(raw, "sphere_radius_m", path, positive=True))
    raise ConfigError(f"{path}.kind",
                      f"expected 'layered' or 'sphere_inclusion', got {kind!r}")


def parse(data: dict) -> ScenarioConfig:
    """Build a validated :class:`ScenarioConfig` from a JSON-style dict."""
    if not isinstance(data, dict):
        raise ConfigError("$", "scenario must be a JSON object")
    version = _int(data, "schema_version", "$", required=False, default=SCHEMA_VERSION)
    classes = _parse_classes(_get(data, "classes", "$"), "classes")
    class_ids = {c.id for c in classes}
    geometry = _parse_geometry(_get(data, "geometry", "$"), "geometry", class_ids)

    traw = _get(data, "trajectory", "$")
    if not isinstance(traw, dict):
        raise ConfigError("trajectory", "expected an object")
    direction = _vec3(traw, "direction", "trajectory")
    norm = float(np.linalg.norm(direction))
    if norm <= 0:
        raise ConfigError("trajectory.direction", "must be a non-zero vector")
    trajectory = TrajectoryConfig(
        entry_m=_vec3(traw, "entry_m", "trajectory"),
        direction=tuple(float(x / norm) for x in direction),
        speed_m_s=_num(traw, "speed_m_s", "trajectory", positive=True),
        duration_s=_num(traw, "duration_s", "trajectory", positive=True))

    iraw = data.get("insertion", {})
    if not isinstance(iraw, dict):
        raise ConfigError("insertion", "expected an object")
    defaults = InsertionConfig()
    trace_radius = _num(iraw, "trace_radius_m", "insertion", required=False,
                        default=defaults.trace_radius_m)
    if trace_radius is not None and trace_radius <= 0:
        raise ConfigError("insertion.trace_radius_m", "must be > 0 or null")
    texture_gain = _num(iraw, "texture_gain", "insertion", required=False,
                        default=defaults.texture_gain)
    if not 0.0 <= texture_gain < 1.0:
        raise ConfigError("insertion.texture_gain", "must be in [0, 1)")
    insertion = InsertionConfig(
        tip_force_n=_num(iraw, "tip_force_n", "insertion", positive=True,
                         required=False, default=defaults.tip_force_n),
        kernel_sigma_m=_num(iraw, "kernel_sigma_m", "insertion", positive=True,
                            required=False, default=defaults.kernel_sigma_m),
        influence_radius_m=_num(iraw, "influence_radius_m", "insertion", positive=True,
                                required=False, default=defaults.influence_radius_m),
        frame_rate_hz=_num(iraw, "frame_rate_hz", "insertion", positive=True,
                           required=False, default=defaults.frame_rate_hz),
        texture_gain=texture_gain,
        texture_seed=_int(iraw, "texture_seed", "insertion", required=False,
                          default=defaults.texture_seed),
        trace_radius_m=trace_radius)

    mraw = data.get("mapping", {})
    if not isinstance(mraw, dict):
        raise ConfigError("mapping", "expected an object")
    mdef = MappingSection()
    mapping_section = MappingSection(
        spring_rest_length_m=_num(mraw, "spring_rest_length_m", "mapping", positive=True,
                                  required=False, default=mdef.spring_rest_length_m),
        reference_frequency_hz=_num(mraw, "reference_frequency_hz", "mapping", positive=True,
                                    required=False, default=mdef.reference_frequency_hz),
        norm_low_percentile=_num(mraw, "norm_low_percentile", "mapping",
                                 required=False, default=mdef.norm_low_percentile),
        norm_high_percentile=_num(mraw, "norm_high_percentile", "mapping",
                                  required=False, default=mdef.norm_high_percentile),
        norm_out_max=_num(mraw, "norm_out_max", "mapping", positive=True,
                          required=False, default=mdef.norm_out_max),
        audio_rate_hz=_num(mraw, "audio_rate_hz", "mapping", positive=True,
                           required=False, default=mdef.audio_rate_hz))
    if not 0.0 <= mapping_section.norm_low_percentile < mapping_section.norm_high_percentile <= 100.0:
        raise ConfigError("mapping.norm_low_percentile",
                          "need 0 <= low < high <= 100 percentiles")
    if not 20.0 < mapping_section.reference_frequency_hz < 2000.0:
        raise ConfigError("mapping.reference_frequency_hz", "must be in (20, 2000) Hz")
    if mapping_section.audio_rate_hz < MIN_AUDIO_RATE_HZ:
        raise ConfigError("mapping.audio_rate_hz",
                          f"must be >= {MIN_AUDIO_RATE_HZ:.0f} Hz "
                          f"(audible/stability floor)")

    sraw = data.get("synth", {})
    if not isinstance(sraw, dict):
        raise ConfigError("synth", "expected an object")
    sdef = SynthSection()
    topology = sraw.get("topology", sdef.topology)
    if topology not in ("string", "lattice"):
        raise ConfigError("synth.topology", f"expected 'string' or 'lattice', got {topology!r}")
    width = _int(sraw, "lattice_width", "synth", required=False, default=sdef.lattice_width)
    if width < 3 or width % 2 == 0:
        raise ConfigError("synth.lattice_width", "must be an odd integer >= 3")
    drivers = sraw.get("drivers", sdef.drivers)
    if drivers not in ("all", "sonic_area"):
        raise ConfigError("synth.drivers", f"expected 'all' or 'sonic_area', got {drivers!r}")
    listeners_raw = sraw.get("listeners", sdef.listeners)
    if listeners_raw == "default":
        listeners = "default"
    elif isinstance(listeners_raw, list) and \
            all(isinstance(x, int) and not isinstance(x, bool) for x in listeners_raw) \
            and listeners_raw:
        listeners = tuple(int(x) for x in listeners_raw)
    else:
        raise ConfigError("synth.listeners",
                          "expected 'default' or a non-empty list of station indices")
    normalize = sraw.get("normalize", sdef.normalize)
    if not isinstance(normalize, bool):
        raise ConfigError("synth.normalize", "expected true or false")
    synth_section = SynthSection(
        topology=topology, lattice_width=width,
        damping_tau_s=_num(sraw, "damping_tau_s", "synth", positive=True,
                           required=False, default=sdef.damping_tau_s),
        normalize=normalize, drivers=drivers, listeners=listeners)

    araw = data.get("analysis", {})
    if not isinstance(araw, dict):
        raise ConfigError("analysis", "expected an object")
    adef = AnalysisSection()
    window = _int(araw, "stft_window", "analysis", required=False, default=adef.stft_window)
    if window < 2 or window & (window - 1):
        raise ConfigError("analysis.stft_window", "must be a power of two")
    hop = _int(araw, "stft_hop", "analysis", required=False, default=adef.stft_hop)
    if not 1 <= hop <= window:
        raise ConfigError("analysis.stft_hop", "must be in [1, stft_window]")
    analysis_section = AnalysisSection(
        stft_window=window, stft_hop=hop,
        envelope_rate_hz=_num(araw, "envelope_rate_hz", "analysis", positive=True,
                              required=False, default=adef.envelope_rate_hz),
        detect_k_sigma=_num(araw, "detect_k_sigma", "analysis", positive=True,
                            required=False, default=adef.detect_k_sigma),
        detect_smoothing_s=_num(araw, "detect_smoothing_s", "analysis", positive=True,
                                required=False, default=adef.detect_smoothing_s),
        merge_window_s=_num(araw, "merge_window_s", "analysis", positive=True,
                            required=False, default=adef.merge_window_s))

    target = _int(data, "target_class_id", "$", required=False, default=None)
    if target is not None and target not in class_ids:
        raise ConfigError("target_class_id", f"unknown class id {target}")
    sonic_radius = _num(data, "sonic_area_radius_m", "$", positive=True,
                        required=False, default=None)

    config = ScenarioConfig(
        classes=classes, geometry=geometry, trajectory=trajectory,
        insertion=insertion, mapping=mapping_section, synth=synth_section,
        analysis=analysis_section, target_class_id=target,
        sonic_area_radius_m=sonic_radius, schema_version=version)
    validate(config)
    return config


def validate(config: ScenarioConfig) -> None:
    """Cross-field checks that need the assembled config."""
    if config.mapping.audio_rate_hz < 2.0 * config.insertion.frame_rate_hz:
        raise ConfigError("mapping.audio_rate_hz",
                          "must be at least twice insertion.frame_rate_hz")
    if config.synth.drivers == "sonic_area" and config.target_class_id is None:
        raise ConfigError("synth.drivers",
                          "'sonic_area' drivers need target_class_id")
    geo = config.geometry
    if geo.kind == "layered":
        spacing = geo.node_spacing_m
        for i, (_, thickness) in enumerate(geo.layers):
            if thickness < spacing:
                raise ConfigError(f"geometry.layers[{i}].thickness_m",
                                  "thinner than node_spacing_m; the layer "
                                  "would contain no grid plane")


def serialize(config: ScenarioConfig) -> dict:
    """Inverse of :func:`parse`; emits plain JSON-compatible types."""
    geo = config.geometry
    if geo.kind == "layered":
        geo_out = {
            "kind": geo.kind,
            "node_spacing_m": geo.node_spacing_m,
            "cross_section_side_m": geo.cross_section_side_m,
            "layers": [{"class_id": cid, "thickness_m": t} for cid, t in geo.layers],
        }
    else:
        geo_out = {
            "kind": geo.kind,
            "node_spacing_m": geo.node_spacing_m,
            "box_side_m": geo.box_side_m,
            "medium_class_id": geo.medium_class_id,
            "inclusion_class_id": geo.inclusion_class_id,
            "sphere_center_m": list(geo.sphere_center_m),
            "sphere_radius_m": geo.sphere_radius_m,
        }
    out = {
        "schema_version": config.schema_version,
        "classes": [
            {"id": c.id, "name": c.name, "rho_kg_m3": c.density_rho,
             "E_pa": c.youngs_modulus_E, "nu": c.poisson_nu,
             "puncture_spike_gain": c.puncture_spike_gain}
            for c in config.classes
        ],
        "geometry": geo_out,
        "trajectory": {
            "entry_m": list(config.trajectory.entry_m),
            "direction": list(config.trajectory.direction),
            "speed_m_s": config.trajectory.speed_m_s,
            "duration_s": config.trajectory.duration_s,
        },
        "insertion": {
            "tip_force_n": config.insertion.tip_force_n,
            "kernel_sigma_m": config.insertion.kernel_sigma_m,
            "influence_radius_m": config.insertion.influence_radius_m,
            "frame_rate_hz": config.insertion.frame_rate_hz,
            "texture_gain": config.insertion.texture_gain,
            "texture_seed": config.insertion.texture_seed,
            "trace_radius_m": config.insertion.trace_radius_m,
        },
        "mapping": {
            "spring_rest_length_m": config.mapping.spring_rest_length_m,
            "reference_frequency_hz": config.mapping.reference_frequency_hz,
            "norm_low_percentile": config.mapping.norm_low_percentile,
            "norm_high_percentile": config.mapping.norm_high_percentile,
            "norm_out_max": config.mapping.norm_out_max,
            "audio_rate_hz": config.mapping.audio_rate_hz,
        },
        "synth": {
            "topology": config.synth.topology,
            "lattice_width": config.synth.lattice_width,
            "damping_tau_s": config.synth.damping_tau_s,
            "normalize": config.synth.normalize,
            "drivers": config.synth.drivers,
            "listeners": ("default" if config.synth.listeners == "default"
                          else list(config.synth.listeners)),
        },
        "analysis": {
            "stft_window": config.analysis.stft_window,
            "stft_hop": config.analysis.stft_hop,
            "envelope_rate_hz": config.analysis.envelope_rate_hz,
            "detect_k_sigma": config.analysis.detect_k_sigma,
            "detect_smoothing_s": config.analysis.detect_smoothing_s,
            "merge_window_s": config.analysis.merge_window_s,
        },
    }
    if config.target_class_id is not None:
        out["target_class_id"] = config.target_class_id
    if config.sonic_area_radius_m is not None:
        out["sonic_area_radius_m"] = config.sonic_area_radius_m
    return out


def load_config(path) -> ScenarioConfig:
    with open(path, "r") as f:
        try:
            data = json.load(f)
        except json.JSONDecodeError as exc:
            raise ConfigError("$", f"invalid JSON in {path}: {exc}") from exc
    return parse(data)


def save_config(config: ScenarioConfig, path) -> None:
    write_text_atomic(path, json.dumps(serialize(config), indent=2) + "\n")


def write_text_atomic(path, text: str) -> None:
    """Write via a temp file in the same directory, then rename."""
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="\n") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_bytes_atomic(path, blob: bytes) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# ---------------------------------------------------------------------------
# assembly

def build_domain(config: ScenarioConfig) -> AnatomicalDomain:
    geo = config.geometry
    if geo.kind == "layered":
        return anatomy.build_layered_domain(
            layers=list(geo.layers), cross_section_side=geo.cross_section_side_m,
            node_spacing=geo.node_spacing_m, classes=list(config.classes))
    return anatomy.build_inclusion_domain(
        medium=geo.medium_class_id, inclusion=geo.inclusion_class_id,
        sphere_center=geo.sphere_center_m, sphere_radius=geo.sphere_radius_m,
        box_side=geo.box_side_m, node_spacing=geo.node_spacing_m,
        classes=list(config.classes))


def build_trajectory(config: ScenarioConfig) -> Trajectory:
    t = config.trajectory
    return Trajectory(entry_point=t.entry_m, direction=t.direction,
                      speed_v=t.speed_m_s, duration=t.duration_s)


def insertion_params(config: ScenarioConfig) -> InsertionParams:
    i = config.insertion
    return InsertionParams(nominal_tip_force_F0=i.tip_force_n,
                           kernel_sigma=i.kernel_sigma_m,
                           influence_radius_R=i.influence_radius_m,
                           frame_rate=i.frame_rate_hz,
                           texture_gain=i.texture_gain,
                           texture_seed=i.texture_seed)


def mapping_config(config: ScenarioConfig) -> MappingConfig:
    m = config.mapping
    return MappingConfig(
        spring_rest_length_L=m.spring_rest_length_m,
        reference_frequency_f_ref=m.reference_frequency_hz,
        normalization=NormalizationSpec(low_percentile=m.norm_low_percentile,
                                        high_percentile=m.norm_high_percentile,
                                        out_max=m.norm_out_max),
        audio_rate=m.audio_rate_hz)


@dataclass
class Scenario:
    """Everything the renderer and experiments need for one scenario run."""

    config: ScenarioConfig
    domain: AnatomicalDomain
    trajectory: Trajectory
    trace: DisplacementTrace
    path: SegmentedPath
    properties: MappedProperties
    mapped_node_ids: np.ndarray     # trace nodes that feed sound nodes
    normalized: np.ndarray          # (n_frames, n_mapped) in [0, out_max]
    excitation: np.ndarray          # (n_stations, n_samples) N

    @property
    def frame_rate(self) -> float:
        return self.trace.frame_rate

    @property
    def audio_rate(self) -> float:
        return self.config.mapping.audio_rate_hz

    @property
    def duration(self) -> float:
        return self.trace.n_frames / self.trace.frame_rate


def simulate(config: ScenarioConfig) -> DisplacementTrace:
    """Track B: run the built-in insertion model for this scenario."""
    domain = build_domain(config)
    return biomech.simulate_insertion(domain, build_trajectory(config),
                                      insertion_params(config),
                                      node_radius=config.insertion.trace_radius_m)


def assemble(config: ScenarioConfig,
             trace: DisplacementTrace | None = None) -> Scenario:
    """Run the pipeline up to excitation forces.

    ``trace`` may be an ingested (Track A) trace; by default the built-in
    insertion model generates one.
    """
    domain = build_domain(config)
    trajectory = build_trajectory(config)
    if trace is None:
        trace = biomech.simulate_insertion(domain, trajectory,
                                           insertion_params(config),
                                           node_radius=config.insertion.trace_radius_m)
    mcfg = mapping_config(config)
    path = mapping.project_to_path(domain, trajectory, mcfg)

    degree = 2 if config.synth.topology == "string" else 6
    properties = mapping.map_properties(config.classes, mcfg,
                                        max_springs_per_mass=degree,
                                        damping_tau=config.synth.damping_tau_s)

    in_map = np.array([int(nid) in path.node_map for nid in trace.node_ids])
    mapped_ids = trace.node_ids[in_map]
    if mapped_ids.size == 0:
        raise mapping.MappingError("trace contains no node mapped to the path")
    norms = trace.norms()[:, in_map]
    normalized = mapping.normalize_displacements(norms, mcfg)
    excitation = mapping.compute_excitation(normalized, mapped_ids, path,
                                            properties, mcfg, trace.frame_rate)
    return Scenario(config=config, domain=domain, trajectory=trajectory,
                    trace=trace, path=path, properties=properties,
                    mapped_node_ids=mapped_ids, normalized=normalized,
                    excitation=excitation)


def build_network(scenario: Scenario) -> MassSpringNetwork:
    """Fresh sound network for this scenario (one per render)."""
    cfg = scenario.config.synth
    if cfg.topology == "string":
        return synth.build_string_topology(scenario.path, scenario.properties,
                                           damping_tau=cfg.damping_tau_s)
    return synth.build_lattice_topology(scenario.path, scenario.properties,
                                        cross_width=cfg.lattice_width,
                                        damping_tau=cfg.damping_tau_s)


def target_segment_span(scenario: Scenario) -> tuple[float, float] | None:
    """Arc-length span of the first target-class segment, if any."""
    target = scenario.config.target_class_id
    if target is None:
        return None
    starts = scenario.path.segment_starts()
    for (cid, length), start in zip(scenario.path.segments, starts):
        if cid == target:
            return float(start), float(start + length)
    return None


def nearest_station(scenario: Scenario, arc_s: float) -> int:
    return int(np.argmin(np.abs(scenario.path.sound_node_positions - arc_s)))


def sonic_area_stations(scenario: Scenario,
                        radius: float | None = None) -> list[int]:
    """Stations within an axial radius of the target-segment start.

    Falls back to every station when no target class (or no radius) is
    configured.
    """
    span = target_segment_span(scenario)
    if radius is None:
        radius = scenario.config.sonic_area_radius_m
    if span is None or radius is None:
        return list(range(scenario.path.n_stations))
    base = nearest_station(scenario, span[0])
    positions = scenario.path.sound_node_positions
    keep = np.abs(positions - positions[base]) <= radius + 1e-12
    return np.nonzero(keep)[0].tolist()


def driver_stations(scenario: Scenario) -> list[int]:
    if scenario.config.synth.drivers == "sonic_area":
        return sonic_area_stations(scenario)
    return list(range(scenario.path.n_stations))


def make_drivers(scenario: Scenario, network: MassSpringNetwork,
                 stations: list[int] | None = None) -> list[Driver]:
    """Drivers at the on-axis mass of each station, skipping fixed end slabs."""
    if stations is None:
        stations = driver_stations(scenario)
    drivers = []
    for st in stations:
        mass = int(network.axis_mass_of_station[st])
        if network.fixed[mass]:
            continue
        drivers.append(Driver(mass_index=mass, force_signal=scenario.excitation[st]))
    return drivers


def default_listeners(scenario: Scenario,
                      network: MassSpringNetwork) -> list[Listener]:
    """One listener at the axial midpoint plus one at the target-segment
    center (when a target class is configured)."""
    cfg = scenario.config.synth
    if cfg.listeners != "default":
        stations = list(cfg.listeners)
    else:
        stations = [scenario.path.n_stations // 2]
        span = target_segment_span(scenario)
        if span is not None:
            stations.append(nearest_station(scenario, 0.5 * (span[0] + span[1])))
    masses = []
    for st in stations:
        if not 0 <= st < scenario.path.n_stations:
            raise ConfigError("synth.listeners", f"station {st} out of range")
        m = int(network.axis_mass_of_station[st])
        if m not in masses:
            masses.append(m)
    return [Listener(mass_index=m) for m in masses]


def render_scenario(scenario: Scenario, stations: list[int] | None = None,
                    duration: float | None = None,
                    normalize: bool | None = None,
                    network: MassSpringNetwork | None = None):
    """Standard render path: build network, attach drivers/listeners, render."""
    if network is None:
        network = build_network(scenario)
    drivers = make_drivers(scenario, network, stations)
    listeners = default_listeners(scenario, network)
    if duration is None:
        duration = scenario.duration
    if normalize is None:
        normalize = scenario.config.synth.normalize
    return synth.render(network, drivers, listeners, duration,
                        scenario.audio_rate, normalize=normalize)
