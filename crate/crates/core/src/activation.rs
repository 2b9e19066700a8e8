//! Smooth activations with `σ(0) = 0` and `σ'(0) = 1`.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Sine,
    Identity,
}

impl Activation {
    pub const ALL: [Activation; 3] = [Activation::Tanh, Activation::Sine, Activation::Identity];

    #[inline]
    pub fn eval(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Sine => x.sin(),
            Activation::Identity => x,
        }
    }

    #[inline]
    pub fn deriv(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            Activation::Sine => x.cos(),
            Activation::Identity => 1.0,
        }
    }

    /// Antiderivative vanishing at 0.
    pub fn antiderivative(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let a = x.abs();
                a + (-2.0 * a).exp().ln_1p() - std::f64::consts::LN_2
            }
            Activation::Sine => 1.0 - x.cos(),
            Activation::Identity => 0.5 * x * x,
        }
    }

    /// `sup |σ'|` over the real line; attained at the origin for every kind.
    pub fn deriv_bound(self) -> f64 {
        1.0
    }

    /// `x` with `σ(x) = y`, for `|y| < 1`.
    pub fn inverse(self, y: f64) -> Option<f64> {
        match self {
            Activation::Tanh if y.abs() < 1.0 => Some(y.atanh()),
            Activation::Sine if y.abs() <= 1.0 => Some(y.asin()),
            Activation::Identity => Some(y),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Sine => "sine",
            Activation::Identity => "identity",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "tanh" => Some(Activation::Tanh),
            "sine" | "sin" => Some(Activation::Sine),
            "identity" | "linear" => Some(Activation::Identity),
            _ => None,
        }
    }
}
