"""Episode-based cross-attention for zero-shot compositional recognition.

The package is a small numpy library plus a command line front end:

* :mod:`epica.graph` reverse-mode differentiation over a fixed op set
* :mod:`epica.data` vocabularies, embeddings, feature files, synthetic worlds
* :mod:`epica.encoders` concept and image encoders
* :mod:`epica.model` the scoring graph and checkpoints
* :mod:`epica.training` inductive and transductive episode training
* :mod:`epica.evaluation` conventional top-1 and generalized AUC protocols
"""

from .data import (
    ConceptPair,
    ConfigError,
    DataFormatError,
    DatasetSplit,
    Domain,
    EmbeddingTable,
    ImageItem,
    SyntheticWorldConfig,
    Vocab,
    build_embeddings,
    generate_synthetic,
    load_embeddings,
    load_features,
    read_split_manifest,
    save_features,
    split_conventional,
    split_generalized,
    write_split_manifest,
)
from .evaluation import (
    AUCCurve,
    EvalReport,
    ScoreMatrix,
    auc,
    auc_curve,
    biased_topk_acc,
    compute_scores,
    evaluate,
    scores_from_csv,
    scores_to_csv,
    top1_unseen,
)
from .graph import Graph, GraphError, NonFiniteError, grad_check
from .model import (
    EpisodeScorer,
    ModelDims,
    ModelParams,
    ScoreVariant,
    load_checkpoint,
    save_checkpoint,
    score_episode,
)
from .training import (
    Adam,
    Episode,
    PseudoLabel,
    TrainConfig,
    build_episode,
    episode_ce_loss,
    gce_loss,
    predict,
    select_confident,
    train_inductive,
    train_transductive,
    write_metrics_csv,
)

__version__ = "0.1.0"
