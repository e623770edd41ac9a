//! Single-shot detection pieces: anchors, matching, multibox loss, decoding.

pub mod anchors;
pub mod boxes;
pub mod decode;
pub mod loss;
pub mod matching;

pub use anchors::{gen_anchors, ssd_anchor_shapes, AnchorBox, AnchorShape, SourceLayerSpec};
pub use boxes::{iou, CornerBox};
pub use decode::{decode_nms, nms, softmax_rows, DecodeParams, Detection};
pub use loss::{det_loss, det_loss_node};
pub use matching::{match_anchors, Assignment, MatchResult};
