"""Knowledge-refined denoising recommender on a small numpy autodiff core."""
__version__ = "0.1.0"

from .data import NoiseSpec, SplitDataset, inject_interaction_noise, split_dataset  # noqa: E402
from .graph import build_indices  # noqa: E402
from .model import KRDN, ModelConfig, score_matrix  # noqa: E402
from .evaluation import full_ranking  # noqa: E402

__all__ = ["KRDN", "ModelConfig", "NoiseSpec", "SplitDataset", "build_indices", "full_ranking",
           "inject_interaction_noise", "score_matrix", "split_dataset"]
