"""Desk-scale laboratory for masked-diffusion decoding-order experiments."""

__version__ = "0.1.0"

from .core import (
    MaskedState,
    StepSchedule,
    Vocabulary,
    apply_commits,
    build_schedule,
    forward_mask,
    masked_state,
)
from .sources import (
    MarkovSource,
    Posterior,
    ar_logprob,
    ar_logprob_after_gap,
    chain_posterior,
    conditional_sample,
    cycle_source,
    exact_denoiser,
    enumeration_denoiser,
    iid_source,
    lossy_counter_source,
    mc_posterior,
    oracle_posterior,
    sample_sequence,
    source_from_config,
    sticky_source,
    uniform_denoiser,
)
from .schedulers import (
    Commit,
    SchedulerConfig,
    Trajectory,
    build_scheduler,
    decode,
    select_ar,
    select_confidence,
    select_nap,
    select_random,
    select_threshold,
    wrap_blockwise,
)
from .metrics import (
    ARnessReport,
    Segmentation,
    SeqDepReport,
    SourceScorer,
    arness_report,
    global_arness,
    segment_delimiter,
    segment_fixed,
    segment_think_blocks,
    seqdep,
    seqdep_profile,
)
from .canvas import (
    CanvasLayout,
    CanvasRegions,
    build_canvas,
    conditional_independence_probe,
    extract_summary,
    make_layout,
)
from .forge import (
    CurationConfig,
    SyntheticTeacher,
    TrainingInstance,
    curate_instance,
    parse_instance,
    render_instance,
    validate_corpus,
)
from .types_util import derive_seed
