"""stegflow: generative steganography on an invertible flow.

Secret bits ride in chosen IEEE-754 bit planes of the flow's latent
tensors; the flow maps latents and images bijectively, so embedding,
generation, and extraction are a single invertible pipeline. The
package adds latent optimization against a learned quality score,
save-format channel simulation, and steganalysis metrics (Acc, bpp, PE).
"""

from .channel import (Channel, ExperimentRow, PeReport, acc, apply_channel,
                      bit_plane_agreement, default_channels, default_plans, pe,
                      pe_from_scores, roundtrip, run_table, train_steganalyzer,
                      write_pe_report, write_table)
from .codec import (BitPlan, Payload, embed, extract, load_latent, parse_plan,
                    plan_capacity, save_latent)
from .errors import (CapacityError, CheckpointError, CodecError, ConfigError,
                     DataError, NonFiniteError, ShapeError, StegflowError,
                     TapeError, TrainingDiverged)
from .flow import FlowConfig, FlowModel, MultiScaleLatent, from_domain, to_domain
from .latentopt import (OptConfig, OptResult, QualityAssessor, diff,
                        init_latent, optimize_latent, train_assessor,
                        write_trace)
from .training import (Dataset, TrainConfig, TrainResult, bits_per_dim,
                       ingest_images, synth_dataset, train, write_loss_curve)

__version__ = "0.1.0"

__all__ = [
    "Channel", "ExperimentRow", "PeReport", "acc", "apply_channel",
    "bit_plane_agreement", "default_channels", "default_plans", "pe",
    "pe_from_scores", "roundtrip", "run_table", "train_steganalyzer",
    "write_pe_report", "write_table",
    "BitPlan", "Payload", "embed", "extract", "load_latent", "parse_plan",
    "plan_capacity", "save_latent",
    "CapacityError", "CheckpointError", "CodecError", "ConfigError",
    "DataError", "NonFiniteError", "ShapeError", "StegflowError", "TapeError",
    "TrainingDiverged",
    "FlowConfig", "FlowModel", "MultiScaleLatent", "from_domain", "to_domain",
    "OptConfig", "OptResult", "QualityAssessor", "diff", "init_latent",
    "optimize_latent", "train_assessor", "write_trace",
    "Dataset", "TrainConfig", "TrainResult", "bits_per_dim", "ingest_images",
    "synth_dataset", "train", "write_loss_curve",
    "__version__",
]
