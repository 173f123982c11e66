"""Function-sharing Kolmogorov-Arnold networks for permutation-symmetric data."""

from .datagen import Dataset, gen_formula, gen_set_classification, gen_signals
from .expressivity import (
    EquivariantLinear,
    ParamSharingMLP,
    build_ps_mlp,
    check_weight_tying,
    fskan_to_mlp,
    mlp_to_fskan,
)
from .layers import (
    EfficientFSKALayer,
    FSInvariantLayer,
    FSKALayer,
    KABank,
    canonicalize_to_fs,
    ka_layer,
)
from .network import FSKANetwork, Network, build_fskan, load_network
from .permgroup import (
    Cyclic,
    DirectProduct,
    Generated,
    Permutation,
    Symmetric,
    Trivial,
    enumerate_orbits,
    parse_group,
    stabilizer_orbit_count,
)
from .spline import SplineConfig, UnivariateFunction
from .train import TrainConfig, train_run

__version__ = "0.1.0"
