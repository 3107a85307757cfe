//! Scene-graph data model, caption/mask construction, the procedural shapes
//! world, dataset plumbing and evaluation metrics.

pub mod caption;
pub mod detect;
pub mod error;
pub mod extract;
pub mod filter;
pub mod graph;
pub mod json;
pub mod manifest;
pub mod mask;
pub mod metrics;
pub mod report;
pub mod tde;
pub mod vg;
pub mod vocab;
pub mod world;

pub use error::{CaptionError, GraphError, ShapeError};
pub use graph::{BBox, ObjectNode, RelationTriple, SceneGraph};
pub use vocab::Vocab;
