//! Constructive networks: delay networks, neural-network emulators and the
//! three-layer oscillator compiled from a causal operator.

pub mod approx;
pub mod compile;
pub mod delay;
pub mod emulator;
pub mod readout;

use nalgebra::{DMatrix, DVector};

use crate::oscillator::Layer;
use crate::transform::FrequencyBank;

pub use approx::{approximate_function, approximate_function_report, function_operator, probe_points, FunctionApproximator, FunctionSpec, LinearRampFamily};
pub use compile::{compile_operator, compile_operator_report, stage_csv, validation_csv, CompileConfig, CompileOutcome, CompiledOscillator, StageReport, ValidationRow};
pub use delay::{build_delay_network, build_delay_network_with, delay_combination, DelayNetwork};
pub use emulator::{build_nn_emulator, build_nn_emulator_on, build_nn_emulator_with, EmulatorOptions, NNEmulator};
pub use readout::{fit_readout, BetaSource, FitOptions, FitReport, ReadoutNet};

/// Sample index ranges of the compiler (disjoint from calibration, probe,
/// validation-of-plan and causality ranges).
pub const FIT_BASE: u64 = 1 << 43;
pub const HELDOUT_BASE: u64 = 1 << 45;
pub const EMULATOR_BASE: u64 = 1 << 46;

/// Sine-transform layer for a `p`-dimensional input: oscillator `i·N + j` has
/// `w = −ω_j²` and reads component `i` with weight `s_j`. With `time_channel`
/// a last oscillator with `w = 0`, `V = 0`, `σ(b) = ½` tracks `t²/4`.
pub(crate) fn bank_layer(bank: &FrequencyBank, p: usize, time_channel: bool) -> Layer {
    let n = bank.len();
    let m = p * n + usize::from(time_channel);
    let mut w = DVector::zeros(m);
    let mut v = DMatrix::zeros(m, p);
    let mut b = DVector::zeros(m);
    for i in 0..p {
        for (j, ch) in bank.channels.iter().enumerate() {
            w[i * n + j] = ch.w();
            v[(i * n + j, i)] = ch.v();
        }
    }
    if time_channel {
        b[m - 1] = bank.act.inverse(0.5).expect("every activation reaches 1/2");
    }
    Layer {
        w,
        v,
        b,
        force_outside: false,
    }
}

/// Per-oscillator readout weights of [`bank_layer`] (`ω_j / s_j`, and 1 for the time channel).
pub(crate) fn bank_readout(bank: &FrequencyBank, p: usize, time_channel: bool) -> DVector<f64> {
    let n = bank.len();
    let mut r = DVector::from_element(p * n + usize::from(time_channel), 1.0);
    for i in 0..p {
        for (j, ch) in bank.channels.iter().enumerate() {
            r[i * n + j] = ch.readout();
        }
    }
    r
}
