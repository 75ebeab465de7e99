"""Weakly supervised phrase grounding via contrastive word-region attention.

Train a word-region attention compatibility function on paired
image-caption features by maximizing a contrastive lower bound on the
mutual information between region sets and caption words, with in-batch
image negatives and language-model-constructed caption negatives; evaluate
grounding with Recall@k and pointing accuracy.
"""

from .attention import (
    AttentionResult,
    CaptionTokens,
    GroundingModel,
    RegionSet,
    attend,
    attention_scores,
    compatibility,
    compatibility_backward,
    compatibility_batch,
    dump_attention,
    init_grounding_model,
    model_from_state_tensors,
    model_state_tensors,
    set_model_mode,
)
from .checkpoint import load_tensors, save_tensors
from .data import (
    Dataset,
    DatasetManifest,
    GroundingExample,
    Phrase,
    SynthConfig,
    batch_iterator,
    build_world,
    load_dataset,
    load_oracle,
    nearest_prototype_accuracy,
    save_dataset,
    save_oracle,
    synth_generate,
)
from .estimator import GroundingEstimator
from .evaluate import (
    EvalReport,
    PhrasePrediction,
    evaluate_model,
    iou,
    phrase_region_scores,
    pointing_accuracy,
    predict_phrases,
    recall_at_k,
)
from .gradcheck import run_gradient_check
from .losses import (
    DiscreteJoint,
    LangSelection,
    LossReport,
    TrainBatch,
    exact_mi,
    infonce_img,
    infonce_lang,
    mi_lower_bound,
    sample_infonce_bound,
    total_loss,
)
from .negcap import (
    CachedNegatives,
    Candidate,
    MaskedCaption,
    NegativeCaptionSet,
    RandomCaptionNegatives,
    TableLm,
    build_negative_cache,
    load_negative_cache,
    make_negatives,
    negatives_for_position,
    rerank_and_keep,
    save_negative_cache,
    table_lm_from_file,
    top_candidates,
)
from .nn import (
    AdamState,
    MlpParams,
    adam_init,
    adam_step,
    finite_diff_grad,
    init_mlp,
    mlp_backward,
    mlp_forward,
)
from .trainer import (
    RunLogRow,
    TrainConfig,
    TrainResult,
    bound_accuracy_pattern,
    read_runlog,
    train,
    validation_bound,
    write_runlog,
)

__version__ = "0.1.0"
