"""Text-guided learned image compression.

A neural image codec whose encoder can condition on a caption of the image:
the caption is embedded, injected into the analysis transform through gated
cross-attention, and the bitstream stays fully decodable without it.  The
package covers training, bit-exact compression and decompression, and
rate-distortion evaluation.
"""

from .codec import CompressionDetails, compress, decompress, pad_image
from .config import (
    AdapterConfig,
    BackboneConfig,
    CodecConfig,
    EntropyConfig,
    LAMBDA_GRID,
    LossWeights,
    TrainConfig,
    load_config,
)
from .container import ContainerHeader, read_container, write_container
from .errors import (
    CodingError,
    ConfigError,
    ContainerError,
    DatasetError,
    ModelMismatchError,
    NumericError,
    ProviderUnavailableError,
    RansUnavailableError,
    ShapeError,
    TacoError,
    TrainingDivergedError,
)
from .evaluation import (
    bench_latency,
    center_crop,
    emit_rd_curve,
    evaluate_dataset,
    load_image,
    ms_ssim,
    psnr,
    save_image,
)
from .losses import (
    LossBreakdown,
    contrastive_loss,
    embedding_distance,
    joint_image_text_loss,
    total_loss,
)
from .model import (
    TextGuidedCodec,
    ensure_text_embedder,
    load_checkpoint,
    save_checkpoint,
)
from .text_embedding import StubTextEmbedder, TextEmbedding, embed_caption
from .training import fit, load_manifest, lr_at_epoch, sample_batch, train_step

__version__ = "0.1.0"

__all__ = [
    "AdapterConfig",
    "BackboneConfig",
    "CodecConfig",
    "CodingError",
    "CompressionDetails",
    "ConfigError",
    "ContainerError",
    "ContainerHeader",
    "DatasetError",
    "EntropyConfig",
    "LAMBDA_GRID",
    "LossBreakdown",
    "LossWeights",
    "ModelMismatchError",
    "NumericError",
    "ProviderUnavailableError",
    "RansUnavailableError",
    "ShapeError",
    "StubTextEmbedder",
    "TacoError",
    "TextEmbedding",
    "TextGuidedCodec",
    "TrainConfig",
    "TrainingDivergedError",
    "bench_latency",
    "center_crop",
    "compress",
    "contrastive_loss",
    "decompress",
    "embed_caption",
    "embedding_distance",
    "emit_rd_curve",
    "ensure_text_embedder",
    "evaluate_dataset",
    "fit",
    "joint_image_text_loss",
    "load_checkpoint",
    "load_config",
    "load_image",
    "load_manifest",
    "lr_at_epoch",
    "ms_ssim",
    "pad_image",
    "psnr",
    "read_container",
    "sample_batch",
    "save_checkpoint",
    "save_image",
    "total_loss",
    "train_step",
    "write_container",
]
