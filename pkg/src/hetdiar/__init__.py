"""Speaker diarization with heterogeneous training batches and soft labels."""

from .assembly import (
    AssembledBatch,
    AssemblyConfig,
    BatchAssembler,
    CorpusIndex,
    analyze_batches,
    assemble_batch,
    augmentation_rate,
    crop_region,
    mix_overlap,
    soft_labels,
)
from .clustering import AgglomerativeScoreClustering, ahc, calibrate_threshold
from .embedder import (
    EmbedderConfig,
    EmbedderNet,
    SpeakerEmbedder,
    TrainingSchedule,
    TrainState,
    extract_embedding,
    forward,
    load_embedder,
    save_embedder,
    soft_cross_entropy,
    train,
    train_step,
)
from .errors import DataError, HetdiarError, NumericError, UsageError
from .features import (
    AudioSignal,
    FeatureMatrix,
    SegmentSpan,
    load_audio,
    mel_filterbank,
    mfcc,
    sliding_mean_normalize,
    uniform_segment,
)
from .metrics import (
    DiarizationHypothesis,
    RttmRecord,
    der,
    jer,
    parse_rttm,
    score_session,
    write_rttm,
)
from .plda import (
    EmbeddingPreprocessor,
    Plda,
    fit_plda,
    fit_preprocessor,
    load_plda,
    preprocess,
    save_plda,
)
from .projection import EmbeddingProjector, pca_project, project_embeddings, tsne_project
from .synthcorpus import (
    CorpusConfig,
    SessionScript,
    SyntheticSpeaker,
    TurnModel,
    build_corpus,
    generate_speakers,
    synth_session,
    synth_utterance,
)
from .vbreseg import (
    DiagonalUbm,
    EigenvoiceModel,
    VbParams,
    collect_stats,
    load_vb_model,
    save_vb_model,
    train_eigenvoices,
    train_ubm,
    vb_resegment,
)

__version__ = "0.1.0"
