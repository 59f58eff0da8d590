# noqa
from .log import TRACE, configure_logging  # noqa
from .model import ModelConfig, ModelParams, forward_branch, forward_triple, infer, init_params  # noqa
from .tensor import Tensor  # noqa

# Configure logging automatically when darkformer is imported
configure_logging()
