"""parasink: parallel columnar event output with an on-demand mini-framework.

The package reproduces three output strategies for a columnar event store --
a classic single-writer path, the same path with implicitly parallelized
basket compression, and a parallel buffer-merger -- plus the scheduling,
stall-monitoring, and benchmark machinery needed to compare them.
"""

from .bench import (
    BenchSettings,
    OutputScenario,
    ProcessingConfig,
    ScalingRow,
    desk_profile,
    run_config,
    sweep,
    verify_container_file,
    verify_outputs,
)
from .codec import (
    Basket,
    ColumnBuffer,
    ColumnStore,
    CompressedBasket,
    ContainerAppender,
    ContainerTrailer,
    FlushPolicy,
    compress_basket,
    decompress_basket,
    read_container,
    write_container,
)
from .errors import (
    ConfigurationError,
    CorruptionError,
    FormatError,
    LifecycleError,
    ModuleExecutionError,
    ParasinkError,
    SchemaMismatchError,
    UsageError,
    ValidationError,
    VerificationError,
)
from .events import (
    Event,
    EventGenerator,
    ProductSchema,
    Tier,
    WorkloadProfile,
    generate_events,
    load_profile,
    save_profile,
)
from .imt import CompressionJob, compress_all, imt_enabled, reset_imt, set_imt
from .merger import (
    BufferMerger,
    MemoryFileBuffer,
    MergeDecision,
    MergeQueue,
    MergerConfig,
    MergeStats,
    QueuePolicy,
)
from .monitor import (
    StallMonitor,
    StallReport,
    StallSample,
    build_report,
    emit_stall_graph,
    gap_flush_correlation,
)
from .pipeline import (
    DirectContainerSink,
    DummySink,
    MergerOutputSink,
    ModuleKind,
    ModuleSpec,
    RunReport,
    Schedule,
    build_schedule,
    burn,
    run,
)
from .pool import ProvenanceRecord, TaskScope, WorkStealingPool

__version__ = "0.1.0"
