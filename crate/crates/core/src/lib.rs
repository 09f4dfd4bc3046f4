//! Label-efficient forest point-cloud analysis: contrastive pretraining of a
//! multi-scale voxel encoder, instance/semantic segmentation and tree
//! classification heads, label-reduction protocols, and evaluation.

pub mod cloudio;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod harness;
pub mod instseg;
pub mod labelreduce;
pub mod semseg;
pub mod ssl;
pub mod synthforest;
pub mod tensorcore;
pub mod training;
pub mod treecls;

pub use cloudio::{PointCloud, SemanticClass, Tile};
pub use encoder::{EncoderConfig, EncoderModel, SparseVoxelGrid, VoxelFeature};
pub use error::{Error, Result};
pub use eval::{DetectionCounts, MetricsReport};
pub use harness::{ExperimentConfig, RunRecord, Strategy, Task};
pub use instseg::{ClusterConfig, InstanceModel, InstancePrediction};
pub use labelreduce::ReductionSpec;
pub use semseg::SemanticModel;
pub use tensorcore::{Checkpoint, LrSchedule, Matrix, Network, Sgd, SgdConfig};
pub use training::{PreparedScene, TrainConfig};
