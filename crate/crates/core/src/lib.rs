//! Joint training of a binary classifier and a counterfactual generator
//! whose counterfactuals are certified to stay valid under bounded
//! parameter shifts of the classifier.

pub mod autodiff;
pub mod bounds;
pub mod certify;
pub mod data;
pub mod eval;
pub mod losses;
pub mod model;
pub mod simul;
pub mod tensor;
pub mod train;

pub use autodiff::{Tape, Var};
pub use bounds::{build_param_box, concretize, crown_ibp_bounds, ibp_forward, Interval, LinBounds, MultiplicitySpec, Norm, ParamBox};
pub use data::{FeatureSchema, Samples, SplitDataset};
pub use model::{JointModel, MlpParams};
pub use simul::{greedy_solve, Method, SimulProblem};
pub use tensor::Tensor;
