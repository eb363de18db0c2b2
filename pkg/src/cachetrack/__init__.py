"""cachetrack: map a scene once with full multi-view attention, keep the
global layers' key/value blocks as the only scene state, then localize new
frames against that cache in time linear in the number of keyframes."""

from .aggregator import (
    Aggregator,
    AggregatorConfig,
    BIDIRECTIONAL,
    Bidirectional,
    KeyframeBlocked,
    OpCounter,
    TokenMatrix,
)
from .attention import ProjectionWeights, matmul, project_qkv, scaled_attention, softmax_rows
from .bench import BenchRow, bench_scaling, fit_complexity
from .cache import CachePublisher, KvCache, attend_with_cache, build_cache, load_cache, save_cache
from .geometry import (
    Pose,
    Sim3,
    Trajectory,
    ate_rmse,
    pose_recall,
    read_tum,
    se3_compose,
    se3_invert,
    sim3_apply,
    umeyama_sim3,
    write_tum,
)
from .keyframing import (
    AngularThreshold,
    FixedInterval,
    Keyframe,
    KeyframeManager,
    RejectionPolicy,
    ViewAngles,
    maybe_reject,
    should_insert,
    view_angles,
)
from .sequence import (
    LoadedFrame,
    OrbitParams,
    PipelineConfig,
    SequenceManifest,
    apply_mask,
    load_sequence,
    synth_orbit,
)
from .tracker import (
    DecodedFrame,
    DecoderHeads,
    HeadConfig,
    StreamResult,
    TrackResult,
    fuse_pointmaps,
    map_keyframes,
    run_stream,
    track_frame,
)

__version__ = "0.1.0"
