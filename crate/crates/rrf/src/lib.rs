//! rrf — a sidecar refinement codec for compressed video.
//!
//! For every group of pictures (GoP) of an already-decoded clip, the encoder
//! fits a small depthwise-separable network to the coding error (source minus
//! decoded), quantizes the parameters and entropy-codes them into a compact
//! sidecar stream. A decoder that has the same decoded clip replays the
//! network to lift reconstruction quality. Nothing inside the original video
//! bitstream changes.
//!
//! Pipeline, end to end:
//!
//! ```text
//!   decoded.yuv ─┬─► segment_gops ─► train_gop ─► fold_bn ─► quantize ─► encode_new/diff ─► stream.rrf
//!   source.yuv ──┘        (per GoP, per channel role; signal only when it helps)
//!
//!   decoded.yuv + stream.rrf ─► decode_sequence ─► refined.yuv
//! ```
//!
//! The crates' modules mirror those stages: [`yuv`] (frame I/O), [`tensor`] /
//! [`layers`] / [`adam`] (the numeric engine), [`net`] (architecture, packing,
//! BN folding, complexity accounting), [`train`] (online per-GoP training),
//! [`quant`] + [`codec`] (parameter quantization and entropy coding),
//! [`stream`] + [`pipeline`] (container and orchestration), [`metrics`] and
//! [`synth`] (evaluation and synthetic test clips).
//!
//! Byte-level formats are specified in `FORMAT.md` at the repository root.

pub mod adam;
pub mod codec;
pub mod layers;
pub mod metrics;
pub mod net;
pub mod pipeline;
pub mod quant;
pub mod rangecoder;
pub mod stream;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod yuv;
