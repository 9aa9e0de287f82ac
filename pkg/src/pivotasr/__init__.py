"""Streaming bifocal transducer with wake-word-pivoted dual-attention biasing.

The runtime pivots between a small encoder plus small biasing attention for
lead-in audio and a large encoder plus large biasing attention for the rest
of the stream, masking the biasing catalog per segment and metering the
attention FLOPs it actually executes.
"""

from .biasing import (
    BiasingConfig,
    CatalogCache,
    CatalogEntry,
    apply_biasing,
    build_catalog_cache,
    context_encode,
    dynamic_mask,
    mha_bias,
)
from .config import RunConfig, load_config, make_config
from .datagen import CorpusSpec, Utterance, detokenize, featurize, generate_corpus, tokenize
from .evalkit import MetricsReport, WWDecision, relative_report, wer, werr, ww_metrics
from .model import Model
from .nn import ParamTensor, Tape, Tensor, backward, bilstm_forward, dense_forward, lstm_step, softmax
from .runtime import (
    AudioStream,
    FlopsReport,
    StreamResult,
    flops_count,
    param_count,
    pivot_select,
    process_stream,
)
from .training import TrainConfig, finetune_biasing, pretrain, sgd_step
from .transducer import (
    BLANK_ID,
    GreedyDecoder,
    TransducerConfig,
    encode,
    greedy_decode,
    joint,
    predict,
    rnnt_loss,
    rnnt_nll,
    time_reduce,
)

__version__ = "0.1.0"
