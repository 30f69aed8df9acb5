"""trigcert: statistical certification of backdoor-trigger absence.

Given a trained feed-forward classifier, a trigger shape and a target
label, the verifier either certifies (via a sequential probability ratio
test over a per-image-set abstract-interpretation check) that no single
trigger reaches the requested attack success rate, synthesizes a concrete
trigger, or reports unknown.
"""

from .constraints import (
    GLOBAL,
    Constraint,
    ConstraintSystem,
    QuickCheck,
    VariableId,
    attack_condition,
    build_phi_pre,
    quick_unsat,
)
from .deeppoly import (
    AbstractNeuron,
    AbstractState,
    LinearExpr,
    analyze,
    back_substitute,
    init_input_state,
    transform_affine,
    transform_relu,
    transform_sigmoid,
    transform_tanh,
)
from .lp import FeasibilityResult, MalformedSystemError, Sat, Unknown, Unsat, check_feasible, conjoin
from .nets import (
    ActivationLayer,
    AffineLayer,
    Image,
    ImageShape,
    Network,
    Trigger,
    TriggerSpec,
    classify,
    forward,
    forward_batch,
    index_flatten,
    index_unflatten,
    lower_conv_to_affine,
    stamp,
    trigger_pixel_indices,
)
from .synthesis import image_loss, op_trigger, total_loss
from .verify import (
    EmptyPopulationError,
    PositionStats,
    SprtOutcome,
    SprtParams,
    Verdict,
    VerifyPrResult,
    VerifyXResult,
    filter_population,
    sprt_decision,
    sprt_step,
    validate_success_rate,
    verify_pr,
    verify_x,
)

__version__ = "0.1.0"
