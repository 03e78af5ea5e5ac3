"""Voxelwise language encoding models, selectivity explanations, synthetic
driving stories, and driving-response statistics."""

__version__ = "0.1.0"

from .core import (
    NGram,
    NGramInventory,
    ResponseMatrix,
    ROIMask,
    Transcript,
    TRGrid,
    Word,
    extract_ngrams,
    load_transcript,
    merge_catalogs,
    save_transcript,
)
from .encoding import (
    EncodingModel,
    ModelBundle,
    RidgeEncoder,
    StabilityTable,
    VoxelSelection,
    evaluate_test,
    fit_ridge_cv,
    roi_stability,
    select_voxels,
    stability_score,
    with_test_r,
)
from .evaluation import (
    CandidateROISet,
    DrivingReport,
    DrivingVector,
    SurfaceMask,
    alternative_voxel_check,
    apply_fdr,
    bh_fdr,
    candidate_roi_grid,
    checkerboard_reconstruct,
    driving_scores,
    format_p,
    ngram_locked_response,
    permutation_test,
    roi_driving,
    selectivity_similarity,
)
from .explain import (
    Explanation,
    NGramScorer,
    NGramScoreTable,
    explain_target,
    pick_diverse,
    score_explanation,
    score_ngrams,
    summarize_candidates,
)
from .io import (
    load_gctf,
    load_model,
    load_response,
    save_gctf,
    save_model,
    save_response,
)
from .llm import HttpChatLLM, LLMClient, RecordingLLM, ReplayLLM, StubLLM
from .signal import (
    FeatureMatrix,
    FileFeatureExtractor,
    HashedNgramExtractor,
    WordFeatureSeq,
    embed_words,
    fir_expand,
    hashed_ngram_extractor,
    lanczos_resample,
    savgol_detrend,
    trim_and_zscore,
    trim_rows,
)
from .simulator import (
    GroundTruthLedger,
    SyntheticSubject,
    add_drift,
    double_gamma_hrf,
    make_corpus,
    make_subject,
    simulate_run,
)
from .storygen import (
    ROI_PROMPT_SUFFIXES,
    MatchMatrix,
    Paragraph,
    Story,
    encoding_prevalidation,
    generate_selective_story,
    generate_story,
    load_story,
    matching_score,
    save_story,
    select_best_stories,
)
