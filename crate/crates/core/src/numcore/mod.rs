//! Dense numerics: parameter vectors, the MLP classifier and objectives.

mod mlp;
mod objective;
mod param;

pub use mlp::{
    backward, flatten, forward_loss, loss_and_accuracy, loss_and_gradient, unflatten, Activation,
    Batch, EvalStats, ForwardOutput, LayerWeights, ModelArch,
};
pub use objective::{
    default_hvp_step, hvp, hvp_on, Counting, MlpObjective, Objective, Quadratic, Scaled,
};
pub use param::ParamVector;

#[cfg(test)]
mod tests;
