"""wmbench: measure how visible watermarks degrade document-VQA accuracy.

The pipeline: load a VQA corpus over document images, synthesize
watermarked variants under controlled conditions, query any
chat-completions-style vision model (or a deterministic mock), grade the
replies, and report accuracy and the performance drop rate per condition.
A separate analysis layer turns attention/embedding tensor dumps into
heatmaps, cosine similarities, and 2-D projections.
"""

__version__ = "0.1.0"

from .corpus import (  # noqa: F401
    DocumentImage,
    EvalDataset,
    ImageLoadError,
    ManifestError,
    VqaItem,
    load_image,
    load_manifest,
    sample,
    save_manifest,
)
from .watermark import (  # noqa: F401
    PlacementBox,
    PlacementError,
    ScaleError,
    WatermarkContent,
    WatermarkSpec,
    composite,
    compute_placement,
    jpeg_defense,
    render_condition,
    solve_glyph_scale,
)
from .client import (  # noqa: F401
    AlwaysCorrect,
    AlwaysWrong,
    AuthenticationError,
    FlipIfDarkened,
    HttpClient,
    MockClient,
    ModelEndpoint,
    ModelReply,
    TransportError,
    build_prompt,
    mock_oracle,
    query,
)
from .metrics import (  # noqa: F401
    EvalRecord,
    RunReport,
    UndefinedMetricError,
    accuracy,
    aggregate,
    content_table,
    grade,
    parse_answer,
    pdr,
    position_table,
)
from .tdump import TensorDump, TensorDumpError, read_tdump, write_tdump  # noqa: F401
from .analysis import (  # noqa: F401
    AnalysisInputError,
    AttentionDelta,
    EmbeddingSummary,
    attention_delta,
    cosine_similarity,
    embedding_summary,
    render_heatmap,
    tsne,
)
from .harness import (  # noqa: F401
    ConfigError,
    ExperimentConfig,
    load_config,
    preset,
    run,
    validate_config,
)
