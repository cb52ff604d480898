//! Quadrotor simulation with online Gaussian-process drag learning for MPC.

pub mod augmented_model;
pub mod drag_models;
pub mod dynamics;
pub mod error;
pub mod estimator;
pub mod mpc;
pub mod rgp;
pub mod sim;
pub mod trajectory;

pub use nalgebra;

pub use augmented_model::{f_pred, f_rgp, ResidualModel, RgpParamVector};
pub use drag_models::{DragModel, DragParams, DragProfile};
pub use dynamics::{f_phys, rk4_step, ControlInput, QuadParams, QuadState, Quaternion};
pub use error::{Error, Result};
pub use estimator::{estimate_drag_observation, ResidualConfig};
pub use rgp::{rgp_infer, rgp_init, rgp_update, DragObservation, KernelHyperparams, RgpDimState, RgpEnsemble};
