//! Architecture description and flat parameter layout for the recurrent
//! design policy.
//!
//! Parameters live in one flat `Vec<f64>` so the trainer can treat the
//! policy as a point in R^d. [`Layout`] assigns every weight matrix, bias,
//! and the log standard deviation a fixed span in that vector; forward and
//! backward passes slice the flat buffer through it. The order of spans is
//! part of the checkpoint format and must not change.

use serde::{Deserialize, Serialize};

/// Shape of the recurrent design policy.
///
/// The network is: dense encoder (two hidden layers, ReLU, linear output),
/// a stack of two GRU cells, and a dense head (two hidden layers, ReLU)
/// ending in the design mean. The log standard deviation of the design
/// distribution is a free parameter, not a network output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyArchConfig {
    /// Inputs per trajectory element: state dims plus one previous-design slot.
    pub input_dim: usize,
    /// Encoder widths `[hidden1, hidden2, output]`.
    pub encoder: [usize; 3],
    /// Hidden width of each GRU cell.
    pub recurrent: [usize; 2],
    /// Head hidden widths.
    pub head: [usize; 2],
    /// Designs per step; the design head emits this many means.
    pub design_dim: usize,
    /// Initial value of the learnable log standard deviation.
    pub init_log_std: f64,
}

impl Default for PolicyArchConfig {
    fn default() -> Self {
        Self {
            input_dim: 3,
            encoder: [256, 256, 64],
            recurrent: [64, 64],
            head: [256, 256],
            design_dim: 1,
            init_log_std: -1.0,
        }
    }
}

impl PolicyArchConfig {
    /// A deliberately small shape for tests and quick experiments.
    pub fn reduced(scale: usize) -> Self {
        let s = scale.max(2);
        Self {
            input_dim: 3,
            encoder: [2 * s, 2 * s, s],
            recurrent: [s, s],
            head: [2 * s, 2 * s],
            design_dim: 1,
            init_log_std: -1.0,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.design_dim != 1 {
            return Err(format!(
                "design_dim {} is not supported; designs are scalar",
                self.design_dim
            ));
        }
        if self.input_dim == 0 {
            return Err("input_dim must be positive".into());
        }
        for w in self
            .encoder
            .iter()
            .chain(self.recurrent.iter())
            .chain(self.head.iter())
        {
            if *w == 0 {
                return Err("all layer widths must be positive".into());
            }
        }
        Ok(())
    }
}

/// Span of one flat-buffer segment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Span {
    pub off: usize,
    pub len: usize,
}

impl Span {
    pub fn slice<'a>(&self, buf: &'a [f64]) -> &'a [f64] {
        &buf[self.off..self.off + self.len]
    }

    pub fn slice_mut<'a>(&self, buf: &'a mut [f64]) -> &'a mut [f64] {
        &mut buf[self.off..self.off + self.len]
    }
}

/// Dense layer spans: row-major `w` of shape `out x in`, bias of length `out`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct DenseSpan {
    pub w: Span,
    pub b: Span,
    pub nin: usize,
    pub nout: usize,
}

/// GRU cell spans: three (input, hidden, bias) triples for the reset,
/// update, and candidate gates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct GruSpan {
    pub wr: Span,
    pub ur: Span,
    pub br: Span,
    pub wu: Span,
    pub uu: Span,
    pub bu: Span,
    pub wc: Span,
    pub uc: Span,
    pub bc: Span,
    pub nin: usize,
    pub nh: usize,
}

/// Fixed positions of every parameter group in the flat vector.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Layout {
    pub enc: [DenseSpan; 3],
    pub gru: [GruSpan; 2],
    pub head: [DenseSpan; 3],
    pub log_std: Span,
    pub total: usize,
}

struct Cursor(usize);

impl Cursor {
    fn take(&mut self, len: usize) -> Span {
        let span = Span { off: self.0, len };
        self.0 += len;
        span
    }

    fn dense(&mut self, nin: usize, nout: usize) -> DenseSpan {
        DenseSpan {
            w: self.take(nin * nout),
            b: self.take(nout),
            nin,
            nout,
        }
    }

    fn gru(&mut self, nin: usize, nh: usize) -> GruSpan {
        GruSpan {
            wr: self.take(nin * nh),
            ur: self.take(nh * nh),
            br: self.take(nh),
            wu: self.take(nin * nh),
            uu: self.take(nh * nh),
            bu: self.take(nh),
            wc: self.take(nin * nh),
            uc: self.take(nh * nh),
            bc: self.take(nh),
            nin,
            nh,
        }
    }
}

impl Layout {
    pub fn new(arch: &PolicyArchConfig) -> Self {
        let mut c = Cursor(0);
        let enc = [
            c.dense(arch.input_dim, arch.encoder[0]),
            c.dense(arch.encoder[0], arch.encoder[1]),
            c.dense(arch.encoder[1], arch.encoder[2]),
        ];
        let gru = [
            c.gru(arch.encoder[2], arch.recurrent[0]),
            c.gru(arch.recurrent[0], arch.recurrent[1]),
        ];
        let head = [
            c.dense(arch.recurrent[1], arch.head[0]),
            c.dense(arch.head[0], arch.head[1]),
            c.dense(arch.head[1], arch.design_dim),
        ];
        let log_std = c.take(arch.design_dim);
        Layout {
            enc,
            gru,
            head,
            log_std,
            total: c.0,
        }
    }
}
