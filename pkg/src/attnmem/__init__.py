"""attnmem: precomputed prefix attention states behind a cosine lookup.

Build a compact, query-indexed dictionary of prefix attention states from
calibration traces, retrieve and losslessly merge them at inference time,
and account for the retrieval-cost and memory-footprint advantages over
full prefix attention.
"""

from .accounting import TrafficModel, asm_traffic, gqa_traffic, run_scaling_bench
from .attention import AttentionState, RopeConfig, apply_rope, attn_with_state, decompose_check, merge
from .bank import (
    HierarchicalIndex,
    MemoryBank,
    MemoryEntries,
    MemoryEntry,
    build_hier_index,
    deserialize_bank,
    retrieve_hier,
    retrieve_linear,
    serialize_bank,
)
from .calibration import (
    CalibSample,
    CapacityError,
    ClusterSpec,
    KeyMode,
    WhiteningTransform,
    aggregate_cluster,
    build_bank,
    build_bank_chunked,
    fit_whitening,
    fit_whitening_transform,
    make_lookup_key,
    merge_chunk_traces,
    minibatch_kmeans,
)
from .inference import (
    InferenceRequest,
    MergeReport,
    infer_merge,
    reconstruction_error,
    request_from_trace,
)
from .synth import SynthSpec, SynthResult, generate
from .tensorstore import (
    ModelGeometry,
    TensorFileError,
    TraceSet,
    load_trace_set,
    read_tensor_file,
    save_trace_set,
    write_tensor_file,
)

__version__ = "0.1.0"
