"""crowdrank: unsupervised crowd counting by ranking image patches against
count-text embeddings, with progressive patch filtering at inference."""

__version__ = "0.1.0"

from .geometry import (  # noqa: F401
    GridSpec,
    ImageRef,
    PatchPyramid,
    Rect,
    SquareCrop,
    build_pyramid,
    extract_and_resize,
    resize_long_side,
    tile_grid,
)
from .prompts import (  # noqa: F401
    PromptSet,
    RankingPromptSpec,
    build_filter_prompts,
    build_ranking_prompts,
    embed_prompt_set,
)
from .encoders import (  # noqa: F401
    EmbeddingMatrix,
    EncoderHandle,
    SimilarityMatrix,
    encode_images,
    encode_texts,
    make_mock_count_encoder,
    make_tiny_encoders,
    similarity,
)
from .training import (  # noqa: F401
    Checkpoint,
    RankingLossReport,
    TrainConfig,
    gradient_check,
    load_checkpoint,
    ranking_loss,
    save_checkpoint,
    train,
)
from .inference import (  # noqa: F401
    CountPrediction,
    InferenceConfig,
    StageDecision,
    predict,
    stage_count,
    stage_filter,
)
from .data import AnnotatedImage, DatasetManifest, ingest  # noqa: F401
from .evaluation import (  # noqa: F401
    EvalReport,
    compute_metrics,
    run_ablation,
    run_cross_eval,
    run_eval,
)
