pub mod error;
pub mod gradcheck;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod corpus;
pub mod model;
pub mod optim;
pub mod synth;
pub mod train;
pub mod headfit;
pub mod checkpoint;
pub mod representer;
pub mod ablation;
pub mod counterfactual;
pub mod type2graph;
pub mod supportness;
pub mod probe;

pub use corpus::{Corpus, DataSplit, SplitSpec, SplitTag, TokenId};
pub use error::{Error, Result};
pub use headfit::{HeadFit, HeadFitConfig, Solver};
pub use model::{ModelConfig, ModelSnapshot, Precision};
pub use representer::{SampleAnnotation, SupportIndex, SupportType};
pub use tensor::Tensor;
pub use train::{Schedule, TrainOutcome};
