pub mod backward;
pub mod baselines;
pub mod checkpoint;
pub mod forward;
pub mod logreg;
pub mod params;

pub use backward::{backward, loss_value, LossParts};
pub use forward::{attend, decode_position, forward, predict, ForwardCache, Mode, PredictionBundle};
pub use params::{ConvFilter, DynplGrads, DynplParams, CONV_WIDTHS, DEFAULT_FILTER_DIM};
