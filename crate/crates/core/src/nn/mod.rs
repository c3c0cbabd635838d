//! Minimal network building blocks on top of candle tensors.

pub mod layers;
pub mod ops;
pub mod params;

pub use layers::{Conv2d, ConvSpec, Linear, Lora};
pub use params::{Init, Module, Param, ParamKind};

use candle_core::Tensor;

use crate::probe::Probe;

/// Per-call forward options.
#[derive(Debug, Clone, Copy)]
pub struct Fwd<'a> {
    /// Apply LoRA corrections.
    pub adapters: bool,
    /// Run RTS blocks; when off they are skipped entirely.
    pub rts: bool,
    pub probe: Option<&'a Probe>,
}

impl Default for Fwd<'_> {
    fn default() -> Self {
        Self { adapters: true, rts: true, probe: None }
    }
}

impl<'a> Fwd<'a> {
    pub fn with_probe(probe: &'a Probe) -> Self {
        Self { probe: Some(probe), ..Self::default() }
    }

    /// Base backbone only: no adapters, no RTS.
    pub fn base() -> Self {
        Self { adapters: false, rts: false, probe: None }
    }

    pub fn note(&self, t: &Tensor) {
        if let Some(p) = self.probe {
            p.note(t);
        }
    }
}
