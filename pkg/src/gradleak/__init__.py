"""gradleak: gradient inversion attacks on simulated federated learning rounds.

The package splits into: a tensor/expression-graph core able to take
gradients of gradients (`tensor`, `graph`, `ops`), declarative attackable
models (`models`), the honest federated side (`flsim`), the reconstruction
attacks (`attack`), quality metrics (`metrics`), image plumbing (`netpbm`)
and the CLI (`cli`).
"""

from .attack import (
    AttackConfig,
    AttackTrace,
    TraceRecord,
    VirtualSample,
    bundle_sq_distance,
    dlg_attack,
    fc_analytic_reconstruct,
    fc_reconstruction_spread,
    gradient_distance,
    improved_dlg,
    infer_label_from_bundle,
    label_from_gradient_sign,
    mean_anchor_penalty,
)
from .errors import (
    AmbiguityError,
    BiasGradientVanishesError,
    CapabilityError,
    ContractError,
    DivergenceError,
    DomainError,
    GeometryError,
    GradleakError,
    IncompatibilityError,
    ParseError,
    ShapeError,
)
from .flsim import (
    AGGREGATE_CLIENT,
    GradientBundle,
    aggregate,
    deserialize_bundle,
    read_bundle,
    serialize_bundle,
    victim_gradient,
    write_bundle,
)
from .graph import ExprGraph, grad, meta_grad
from .metrics import (
    ConvergenceReport,
    ImagePair,
    convergence_report,
    mse_255,
    mse_unit,
    report_kv,
    report_tsv,
)
from .models import (
    Activation,
    Conv,
    Dense,
    Flatten,
    LossGraph,
    ModelParams,
    ModelSpec,
    Pool,
    build_logits,
    build_model,
    default_attack_spec,
    forward_loss,
    one_hot,
    parse_model_text,
)
from .netpbm import (
    ImageBuffer,
    decode_image,
    encode_image,
    read_image,
    synth_image,
    write_image,
)
from .ops import affine, avg_pool2d, conv2d, cross_entropy, sigmoid, softmax
from .tensor import SeedRng, Tensor

__version__ = "0.1.0"
