//! Heap configuration and the six allocator variants.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

/// Largest number of chunks a heap may be split into; chunk indices must fit
/// the high bits of a packed [`PageHandle`](crate::PageHandle).
pub const MAX_CHUNKS: usize = 1 << 24;

/// Smallest page size accepted. Every page offset is a multiple of its page
/// size, so this is also the minimum alignment of a grant.
pub const MIN_PAGE_BYTES: usize = 16;

/// Storage used behind an [`IndexQueue`](crate::IndexQueue).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum QueueFlavor {
    /// Flat slot array reserved up front.
    Array,
    /// Directory of segments, each segment an arena chunk.
    VirtualArray,
    /// Linked list of segments, links stored inside the segments.
    VirtualList,
}

impl QueueFlavor {
    pub fn is_virtual(self) -> bool {
        !matches!(self, QueueFlavor::Array)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AllocatorKind {
    /// Per-class queues of page handles over a static heap partition.
    Page,
    /// Shared chunk pool plus per-class queues of chunks with free pages.
    Chunk,
}

/// What a thread does between failed acquisition rounds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BackoffMode {
    /// Sequentially consistent fence followed by a processor yield.
    FenceRetry,
    /// Capped exponential sleep.
    SleepRetry,
}

impl FromStr for BackoffMode {
    type Err = ParseVariantError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "fence" => Ok(BackoffMode::FenceRetry),
            "sleep" => Ok(BackoffMode::SleepRetry),
            other => Err(ParseVariantError(other.to_owned())),
        }
    }
}

/// The six allocator variants: {page, chunk} x {array, virtual array,
/// virtual list} queue storage.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Variant {
    Page,
    Chunk,
    VaPage,
    VaChunk,
    VlPage,
    VlChunk,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Page,
        Variant::Chunk,
        Variant::VaPage,
        Variant::VaChunk,
        Variant::VlPage,
        Variant::VlChunk,
    ];

    pub fn kind(self) -> AllocatorKind {
        match self {
            Variant::Page | Variant::VaPage | Variant::VlPage => AllocatorKind::Page,
            Variant::Chunk | Variant::VaChunk | Variant::VlChunk => AllocatorKind::Chunk,
        }
    }

    pub fn flavor(self) -> QueueFlavor {
        match self {
            Variant::Page | Variant::Chunk => QueueFlavor::Array,
            Variant::VaPage | Variant::VaChunk => QueueFlavor::VirtualArray,
            Variant::VlPage | Variant::VlChunk => QueueFlavor::VirtualList,
        }
    }

    pub fn from_parts(kind: AllocatorKind, flavor: QueueFlavor) -> Variant {
        match (kind, flavor) {
            (AllocatorKind::Page, QueueFlavor::Array) => Variant::Page,
            (AllocatorKind::Chunk, QueueFlavor::Array) => Variant::Chunk,
            (AllocatorKind::Page, QueueFlavor::VirtualArray) => Variant::VaPage,
            (AllocatorKind::Chunk, QueueFlavor::VirtualArray) => Variant::VaChunk,
            (AllocatorKind::Page, QueueFlavor::VirtualList) => Variant::VlPage,
            (AllocatorKind::Chunk, QueueFlavor::VirtualList) => Variant::VlChunk,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Page => "page",
            Variant::Chunk => "chunk",
            Variant::VaPage => "va-page",
            Variant::VaChunk => "va-chunk",
            Variant::VlPage => "vl-page",
            Variant::VlChunk => "vl-chunk",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("unknown name `{0}`")]
pub struct ParseVariantError(pub String);

impl FromStr for Variant {
    type Err = ParseVariantError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| ParseVariantError(s.to_owned()))
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ConfigError {
    #[error("{field} = {value} is not a power of two")]
    NotPowerOfTwo { field: &'static str, value: usize },
    #[error("sizes must satisfy min_page <= max_page <= chunk <= heap (got {min_page}, {max_page}, {chunk}, {heap})")]
    Ordering {
        min_page: usize,
        max_page: usize,
        chunk: usize,
        heap: usize,
    },
    #[error("min_page_bytes = {0} is below the {MIN_PAGE_BYTES}-byte minimum")]
    PageTooSmall(usize),
    #[error("{0} chunks exceed the packed-handle limit")]
    TooManyChunks(usize),
    #[error("heap of {chunks} chunks cannot hold {needed} chunks of queue segments plus one payload chunk")]
    HeapTooSmall { chunks: usize, needed: usize },
    #[error("queue capacity must be at least 1")]
    ZeroCapacity,
    #[error("virtual queue flavors need a segment pool")]
    MissingPool,
    #[error("could not reserve {0} bytes of host memory for the arena")]
    HostAllocation(usize),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HeapConfig {
    pub heap_bytes: usize,
    pub chunk_bytes: usize,
    pub min_page_bytes: usize,
    pub max_page_bytes: usize,
    pub queue_flavor: QueueFlavor,
    pub allocator_kind: AllocatorKind,
    pub backoff: BackoffMode,
    /// Backoff rounds before an allocation reports out-of-memory.
    pub max_retries: u32,
    /// Fully free chunks a class keeps instead of returning them to the
    /// pool (chunk allocators only).
    pub retained_chunks_per_class: u32,
}

impl Default for HeapConfig {
    fn default() -> Self {
        HeapConfig {
            heap_bytes: 64 << 20,
            chunk_bytes: 64 << 10,
            min_page_bytes: 16,
            max_page_bytes: 8192,
            queue_flavor: QueueFlavor::Array,
            allocator_kind: AllocatorKind::Page,
            backoff: BackoffMode::FenceRetry,
            max_retries: 64,
            retained_chunks_per_class: 1,
        }
    }
}

impl HeapConfig {
    pub fn for_variant(variant: Variant) -> Self {
        HeapConfig::default().with_variant(variant)
    }

    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.allocator_kind = variant.kind();
        self.queue_flavor = variant.flavor();
        self
    }

    pub fn with_heap_bytes(mut self, heap_bytes: usize) -> Self {
        self.heap_bytes = heap_bytes;
        self
    }

    pub fn with_chunk_bytes(mut self, chunk_bytes: usize) -> Self {
        self.chunk_bytes = chunk_bytes;
        self
    }

    pub fn variant(&self) -> Variant {
        Variant::from_parts(self.allocator_kind, self.queue_flavor)
    }

    pub fn num_chunks(&self) -> usize {
        self.heap_bytes / self.chunk_bytes
    }

    /// Number of power-of-two size classes between the min and max page size.
    pub fn num_classes(&self) -> usize {
        (self.max_page_bytes / self.min_page_bytes).trailing_zeros() as usize + 1
    }

    /// Low bits of a packed handle reserved for the page index.
    pub fn page_bits(&self) -> u32 {
        (self.chunk_bytes / self.min_page_bytes).trailing_zeros()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        for (field, value) in [
            ("heap_bytes", self.heap_bytes),
            ("chunk_bytes", self.chunk_bytes),
            ("min_page_bytes", self.min_page_bytes),
            ("max_page_bytes", self.max_page_bytes),
        ] {
            if !value.is_power_of_two() {
                return Err(ConfigError::NotPowerOfTwo { field, value });
            }
        }
        if !(self.min_page_bytes <= self.max_page_bytes
            && self.max_page_bytes <= self.chunk_bytes
            && self.chunk_bytes <= self.heap_bytes)
        {
            return Err(ConfigError::Ordering {
                min_page: self.min_page_bytes,
                max_page: self.max_page_bytes,
                chunk: self.chunk_bytes,
                heap: self.heap_bytes,
            });
        }
        if self.min_page_bytes < MIN_PAGE_BYTES {
            return Err(ConfigError::PageTooSmall(self.min_page_bytes));
        }
        let chunks = self.num_chunks();
        // The chunk index occupies the bits above the page index.
        if chunks > MAX_CHUNKS || (chunks as u64) << self.page_bits() > 1u64 << 32 {
            return Err(ConfigError::TooManyChunks(chunks));
        }
        Ok(())
    }
}
