from .tensor import (
    LayerSpec,
    NetworkSpec,
    ParamSpec,
    NonFiniteError,
    mlp,
    lenet_300_100,
    small_cnn,
    forward,
    backward,
    softmax_cross_entropy,
    accuracy,
    init_buffers,
    dense_of,
    trainable_of,
)
from .optim import sgd_step, NesterovSGD
from .sparse import (
    MaskedTensor,
    SparsityReport,
    SizeAccount,
    init_dense,
    init_sparse,
    apply_mask,
    sparsity_report,
    count_parameters,
    descriptive_length,
)
from .realloc import (
    ReallocState,
    StepReport,
    apportion,
    prune_by_threshold,
    adjust_threshold,
    grow,
    realloc_step,
    realloc_step_structured,
)
from .hashed import HashedTensor, hash_indices, hashed_forward, init_hashed
from .baselines import (
    DeepRState,
    set_step,
    deepr_step,
    prune_to_sparsity,
    compress_iterative,
    build_thin_dense,
)
