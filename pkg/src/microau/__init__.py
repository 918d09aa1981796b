"""Micro-expression action-unit detection at desk scale.

Pipeline: learnable temporal difference filter -> SE-gated 3D CNN ->
mid/high feature fusion into a single visual token -> compact LoRA-adapted
transformer -> per-AU sigmoid classification under an asymmetric loss,
evaluated with leave-one-subject-out and cross-dataset protocols.
"""

from .backbone import Backbone, BackboneConfig, FeatureBundle, heatmap
from .data import (COMPACT_AU_SET, FULL_AU_SET, SUPPORTED_AUS, Dataset, FoldSplit,
                   SampleRecord, au_region_mask, generate_synthetic, load_dataset,
                   loso_split, map_label_space, save_dataset)
from .errors import (ConfigurationError, DeterminismError, DimensionError, FormatError,
                     MicroAuError, NumericDomainError, ProtocolError, ValidationError)
from .fusion import EfpConfig, FusionProjector
from .led import LedConfig, LedFilter, LedMatrix, apply_led, build_led_matrix, normalize_rows
from .model import AuDetector, build_detector, read_checkpoint
from .objective import (AslConfig, ConfusionCounts, MetricsReport, asl_loss,
                        confusion_counts, f1_per_au, macro_f1, render_table)
from .reasoner import (PROMPT_TEXT, LoraAdapter, PromptSpec, Reasoner, ReasonerConfig,
                       build_prompt_spec, lora_linear, tokenize)
from .tensorcore import GradCheckReport, Rng, dropout, grad_check, matmul, zero_grads
from .training import (FoldResult, RunReport, run_ablation, run_cross_domain, run_loso,
                       train_fold, train_full)

__version__ = "0.1.0"
