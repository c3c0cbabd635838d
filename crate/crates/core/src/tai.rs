//! Sub-batched execution of phase lists.
//!
//! A network is a list of phases. Spatial phases are per-frame maps run on one
//! sub-batch of frames at a time; temporal phases are RTS blocks run on the
//! concatenation of all sub-batches. Full-batch inference is the same executor
//! with a single range, so any plan computes the same function.
//!
//! Memory is counted in tensor elements noted by the layers:
//! - `spatial`: largest total noted while running one spatial phase on one sub-batch;
//! - `rts`: largest total noted while running one RTS block on the full sequence;
//! - `total`: largest resident state plus in-flight activations at any point.

use std::fmt::Write as _;

use candle_core::Tensor;

use crate::nets::Generator;
use crate::nn::Fwd;
use crate::probe::Probe;
use crate::rts::RtsBlock;
use crate::videodata::VideoTensor;
use crate::{Error, Result};

/// Contiguous partition of `n` frames into ranges of `b` (last may be shorter).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaiPlan {
    n: usize,
    b: usize,
    ranges: Vec<(usize, usize)>,
}

pub fn make_plan(n: usize, b: usize) -> Result<TaiPlan> {
    if n == 0 || b == 0 {
        return Err(Error::Parameter(format!("plan needs N >= 1 and b >= 1, got N={n}, b={b}")));
    }
    let ranges = (0..n).step_by(b).map(|s| (s, (s + b).min(n))).collect();
    Ok(TaiPlan { n, b: b.min(n), ranges })
}

impl TaiPlan {
    pub fn frames(&self) -> usize {
        self.n
    }

    pub fn batch(&self) -> usize {
        self.b
    }

    pub fn sub_batches(&self) -> usize {
        self.ranges.len()
    }

    /// Half-open `[start, end)` frame ranges.
    pub fn ranges(&self) -> &[(usize, usize)] {
        &self.ranges
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum ExecMode {
    #[default]
    Sequential,
    /// Sub-batches of a spatial phase run on separate threads.
    Parallel,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MemoryReport {
    pub spatial_peak: usize,
    pub rts_peak: usize,
    pub total_peak: usize,
}

impl MemoryReport {
    pub fn peak_activation_elements(&self) -> usize {
        self.total_peak
    }

    /// `phase,peak_elements` lines.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in [("spatial", self.spatial_peak), ("rts", self.rts_peak), ("total", self.total_peak)] {
            writeln!(s, "{k},{v}").expect("write to string");
        }
        s
    }
}

/// Per-sub-batch state threaded through the phases. Every tensor has frames on axis 0.
#[derive(Debug, Clone)]
pub struct SegState {
    pub x: Tensor,
    pub skips: Vec<Tensor>,
    pub z_lr: Option<Tensor>,
}

impl SegState {
    pub fn new(x: Tensor) -> Self {
        Self { x, skips: Vec::new(), z_lr: None }
    }

    pub fn elements(&self) -> usize {
        self.x.elem_count() + self.skips.iter().map(Tensor::elem_count).sum::<usize>() + self.z_lr.as_ref().map_or(0, Tensor::elem_count)
    }

    fn narrow(&self, start: usize, len: usize) -> Result<Self> {
        Ok(Self {
            x: self.x.narrow(0, start, len)?,
            skips: self.skips.iter().map(|s| s.narrow(0, start, len)).collect::<candle_core::Result<_>>()?,
            z_lr: self.z_lr.as_ref().map(|z| z.narrow(0, start, len)).transpose()?,
        })
    }

    fn cat(parts: &[SegState]) -> Result<Self> {
        if parts.len() == 1 {
            return Ok(parts[0].clone());
        }
        let cat = |ts: Vec<&Tensor>| Tensor::cat(&ts, 0);
        let n_skips = parts[0].skips.len();
        Ok(Self {
            x: cat(parts.iter().map(|p| &p.x).collect())?,
            skips: (0..n_skips).map(|i| cat(parts.iter().map(|p| &p.skips[i]).collect())).collect::<candle_core::Result<_>>()?,
            z_lr: match parts[0].z_lr {
                Some(_) => Some(cat(parts.iter().map(|p| p.z_lr.as_ref().expect("uniform state")).collect())?),
                None => None,
            },
        })
    }
}

pub type SpatialFn<'a> = Box<dyn Fn(SegState, &Fwd) -> Result<SegState> + Send + Sync + 'a>;

pub enum PhaseOp<'a> {
    Spatial(SpatialFn<'a>),
    Temporal(&'a RtsBlock),
}

pub struct Phase<'a> {
    pub name: String,
    pub op: PhaseOp<'a>,
    /// Entering this phase starts one UNet evaluation.
    pub unet_entry: bool,
}

impl<'a> Phase<'a> {
    pub fn spatial(name: impl Into<String>, f: impl Fn(SegState, &Fwd) -> Result<SegState> + Send + Sync + 'a) -> Self {
        Self { name: name.into(), op: PhaseOp::Spatial(Box::new(f)), unet_entry: false }
    }

    pub fn temporal(name: impl Into<String>, block: &'a RtsBlock) -> Self {
        Self { name: name.into(), op: PhaseOp::Temporal(block), unet_entry: false }
    }

    pub fn entry(mut self) -> Self {
        self.unet_entry = true;
        self
    }
}

/// Runs `phases` over `input` following `plan`. Spatial phases are indexed by
/// their position in `phases` for the probe's frame-visit counters.
pub fn execute(phases: &[Phase<'_>], input: SegState, plan: &TaiPlan, fwd: &Fwd, mode: ExecMode) -> Result<(SegState, MemoryReport)> {
    let frames = input.x.dim(0)?;
    if frames != plan.frames() {
        return Err(Error::Parameter(format!("plan covers {} frames, input has {frames}", plan.frames())));
    }
    let local = Probe::new();
    let probe = fwd.probe.unwrap_or(&local);
    let fwd = Fwd { probe: Some(probe), ..*fwd };
    probe.take_segment();

    let mut states: Vec<SegState> = plan.ranges().iter().map(|&(s, e)| input.narrow(s, e - s)).collect::<Result<_>>()?;
    drop(input);
    let mut report = MemoryReport::default();
    let resident = |states: &[SegState]| states.iter().map(SegState::elements).sum::<usize>();

    for (pi, phase) in phases.iter().enumerate() {
        match &phase.op {
            PhaseOp::Spatial(f) => {
                if phase.unet_entry {
                    probe.count_unet_call();
                }
                match mode {
                    ExecMode::Sequential => {
                        for (sb, &(s, e)) in plan.ranges().iter().enumerate() {
                            let held = resident(&states);
                            let out = f(states[sb].clone(), &fwd)?;
                            let seg = probe.take_segment();
                            report.spatial_peak = report.spatial_peak.max(seg);
                            report.total_peak = report.total_peak.max(held + seg);
                            probe.visit_frames(pi, s, e, frames);
                            states[sb] = out;
                        }
                    }
                    ExecMode::Parallel => {
                        let held = resident(&states);
                        let outs: Vec<Result<SegState>> = std::thread::scope(|scope| {
                            let handles: Vec<_> = states
                                .iter()
                                .map(|st| {
                                    let fwd = &fwd;
                                    scope.spawn(move || f(st.clone(), fwd))
                                })
                                .collect();
                            handles.into_iter().map(|h| h.join().expect("sub-batch thread panicked")).collect()
                        });
                        let seg = probe.take_segment();
                        report.spatial_peak = report.spatial_peak.max(seg);
                        report.total_peak = report.total_peak.max(held + seg);
                        for (sb, out) in outs.into_iter().enumerate() {
                            let (s, e) = plan.ranges()[sb];
                            probe.visit_frames(pi, s, e, frames);
                            states[sb] = out?;
                        }
                    }
                }
            }
            PhaseOp::Temporal(block) => {
                if !fwd.rts {
                    continue;
                }
                let held = resident(&states);
                let xs: Vec<&Tensor> = states.iter().map(|s| &s.x).collect();
                let full = if xs.len() == 1 { xs[0].clone() } else { Tensor::cat(&xs, 0)? };
                fwd.note(&full);
                let y = block.forward(&full, &fwd)?;
                let seg = probe.take_segment();
                report.rts_peak = report.rts_peak.max(seg);
                report.total_peak = report.total_peak.max(held + seg);
                for (st, &(s, e)) in states.iter_mut().zip(plan.ranges()) {
                    st.x = if plan.sub_batches() == 1 { y.clone() } else { y.narrow(0, s, e - s)? };
                }
            }
        }
    }
    Ok((SegState::cat(&states)?, report))
}

/// Sub-batched generator forward with instrumentation. The degradation factor is
/// estimated once on the whole clip before partitioning.
pub fn tai_forward_with(g: &Generator, v_lr: &VideoTensor, plan: &TaiPlan, fwd: &Fwd, mode: ExecMode) -> Result<(Tensor, MemoryReport)> {
    if v_lr.frames() != plan.frames() {
        return Err(Error::Parameter(format!("plan covers {} frames, video has {}", plan.frames(), v_lr.frames())));
    }
    let prep = g.prepare(v_lr)?;
    g.run(&prep, plan, fwd, mode)
}

pub fn tai_forward(g: &Generator, v_lr: &VideoTensor, plan: &TaiPlan) -> Result<VideoTensor> {
    let (y, _) = tai_forward_with(g, v_lr, plan, &Fwd::default(), ExecMode::Sequential)?;
    VideoTensor::from_signed_tensor(&y)
}

pub fn measure_memory(g: &Generator, v_lr: &VideoTensor, plan: &TaiPlan) -> Result<MemoryReport> {
    Ok(tai_forward_with(g, v_lr, plan, &Fwd::default(), ExecMode::Sequential)?.1)
}
