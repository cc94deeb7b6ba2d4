"""Physics-based sonification of tool-tissue interaction displacement fields.

Pipeline stages, one module each:

* :mod:`biosonix.anatomy` - discretized tissue domains and tool trajectories
* :mod:`biosonix.biomech` - displacement traces (built-in insertion model or
  ingested CSV)
* :mod:`biosonix.mapping` - material -> oscillator properties, path
  projection, displacement -> excitation forces
* :mod:`biosonix.synth` - mass-spring sound networks, audio-rate rendering,
  WAV I/O
* :mod:`biosonix.analysis` - spectra, envelopes, correlation, transition
  detection, experiment runners
* :mod:`biosonix.scenario` - JSON scenario configs and pipeline assembly
* :mod:`biosonix.cli` - the ``biosonix`` command
"""

from .anatomy import (
    AnatomicalDomain,
    DomainError,
    GeometryKind,
    TissueClass,
    Trajectory,
    TrajectoryMissError,
    build_inclusion_domain,
    build_layered_domain,
    classify_point,
)
from .biomech import (
    DisplacementTrace,
    InsertionParams,
    TraceSource,
    boundary_crossing_times,
    load_trace,
    save_nodes_csv,
    save_trace,
    simulate_insertion,
)
from .mapping import (
    MappedProperties,
    MappingConfig,
    MappingError,
    NormalizationSpec,
    SegmentedPath,
    compute_excitation,
    map_properties,
    normalize_displacements,
    project_to_path,
)
from .synth import (
    AudioBuffer,
    Driver,
    Listener,
    MassSpringNetwork,
    StabilityError,
    TopologyKind,
    build_lattice_topology,
    build_string_topology,
    read_wav,
    render,
    stability_check,
    step,
    write_wav,
)
from .analysis import (
    EnvelopeSeries,
    ExperimentReport,
    Spectrogram,
    correlate,
    detect_transitions,
    rms_envelope,
    run_contribution_sweep,
    run_nodal_characterization,
    run_sonic_area_sweep,
    spectral_centroid,
    stft,
)
from .scenario import (
    ConfigError,
    Scenario,
    ScenarioConfig,
    assemble,
    load_config,
    parse,
    render_scenario,
    save_config,
    serialize,
)

__version__ = "0.1.0"
