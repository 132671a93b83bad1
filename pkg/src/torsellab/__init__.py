"""torsellab: a desk-scale laboratory for Tor path selection.

Generate a synthetic relay network, run competing circuit-selection
algorithms through a deterministic stream simulator, train fast/slow
circuit classifiers on the results, and score every algorithm with
anonymity metrics (sender-AS leakage game, Gini coefficient, uniformity
degree, vulnerable-stream rate, time to first compromise).
"""

from .errors import (
    ConfigError,
    DegenerateDataError,
    ParseError,
    SelectionError,
    SimulationError,
    StarvationError,
    TorselError,
    UnknownAsnError,
    ValidationError,
)
from .netmodel import (
    AsTopology,
    Endpoint,
    NetConfig,
    NetworkModel,
    Relay,
    as_path,
    generate_network,
    geo_rtt_ms,
    great_circle_km,
    load_network,
    save_network,
)
from .simcore import (
    Circuit,
    LoadState,
    SimContext,
    StreamRecord,
    Workload,
    fixed_point_load,
    probe_rtt,
    relay_utilization,
    run_epochs,
    ttlb_oracle,
)
from .pathsel import (
    CarState,
    WeightTable,
    car_congestion,
    car_pick,
    car_should_switch,
    denasa_e_select,
    denasa_g_select,
    guard_assignment,
    make_selectors,
    predictor_select,
    sb_select,
    vanilla_select,
)
from .learn import (
    EvalReport,
    ForestModel,
    ForestParams,
    encode_country,
    evaluate,
    extract_features,
    knn_predict,
    label_samples,
    predict_forest,
    sweep_tau,
    train_forest,
)
from .anonmetrics import (
    ClasiPath,
    LeakageReport,
    PathSimulator,
    circuit_length_km,
    clasi_game,
    generate_paths,
    gini,
    time_to_first_compromise,
    uniformity_degree,
    vincenty_inverse,
    vincenty_km,
    vulnerable_rate,
)

__version__ = "0.1.0"
