//! Structured slot memory: gated writes, attention reads, forgetting
//! updates and fusion of read content with the controller state.
//!
//! All operations are batched. A hidden state is `[B, d_h]`, a memory is
//! `[B, n, d_m]`, gates are `[B, 1]` and slot weightings are `[B, n]`; the
//! unbatched case is simply `B = 1`. Weight matrices are stored
//! input-major (`[d_in, d_out]`) so that `h · W` maps a row state forward.

use std::fmt;
use std::str::FromStr;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Tensor, Var};

/// Tolerance for "sums to one" checks on slot weightings.
pub const SIMPLEX_TOL: f64 = 1e-9;

/// How a write is distributed over slots.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum WriteMode {
    /// Per-slot gates are the scalar gates scaled by the write weighting.
    #[default]
    Addressed,
    /// Every slot receives the same scalar gates.
    Uniform,
}

impl FromStr for WriteMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "addressed" => Ok(WriteMode::Addressed),
            "uniform" => Ok(WriteMode::Uniform),
            other => Err(Error::Config(format!(
                "unknown write mode `{other}` (expected `addressed` or `uniform`)"
            ))),
        }
    }
}

impl fmt::Display for WriteMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            WriteMode::Addressed => "addressed",
            WriteMode::Uniform => "uniform",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum InitScheme {
    Zeros,
    Gaussian { sigma: f64 },
}

impl Default for InitScheme {
    fn default() -> Self {
        InitScheme::Gaussian { sigma: 0.01 }
    }
}

/// Initial slot contents, `[n, d_m]`.
pub fn init_memory(n: usize, dim: usize, scheme: InitScheme, rng: &mut Rng) -> Result<Tensor> {
    if n == 0 || dim == 0 {
        return Err(Error::Config(format!(
            "memory needs at least one slot of positive width, got {n}x{dim}"
        )));
    }
    let data = match scheme {
        InitScheme::Zeros => vec![0.0; n * dim],
        InitScheme::Gaussian { sigma } => {
            let normal = Normal::new(0.0, sigma)
                .map_err(|e| Error::Config(format!("memory init sigma {sigma}: {e}")))?;
            (0..n * dim).map(|_| normal.sample(rng)).collect()
        }
    };
    Tensor::matrix(n, dim, data)
}

/// A batch of memories on the tape, `[B, n, d_m]`.
#[derive(Clone, Copy, Debug)]
pub struct MemoryState<'t> {
    slots: Var<'t>,
}

impl<'t> MemoryState<'t> {
    pub fn new(slots: Var<'t>) -> Result<Self> {
        let shape = slots.shape();
        if shape.len() != 3 {
            return Err(Error::dim(
                "memory",
                format!("slots must be [batch, n, d_m], got {shape:?}"),
            ));
        }
        Ok(Self { slots })
    }

    /// Broadcasts an `[n, d_m]` initial memory over a batch.
    pub fn from_initial(initial: Var<'t>, batch: usize) -> Result<Self> {
        Self::new(initial.repeat_batch(batch)?)
    }

    pub fn slots(&self) -> Var<'t> {
        self.slots
    }

    pub fn batch(&self) -> usize {
        self.slots.shape()[0]
    }

    pub fn n(&self) -> usize {
        self.slots.shape()[1]
    }

    pub fn dim(&self) -> usize {
        self.slots.shape()[2]
    }

    pub fn value(&self) -> Tensor {
        self.slots.value()
    }
}

/// The trainable parameters of the memory unit, bound to one tape.
#[derive(Clone, Copy, Debug)]
pub struct GateParams<'t> {
    /// `[d_h, 1]`
    pub w_write: Var<'t>,
    /// `[1, 1]`
    pub b_write: Var<'t>,
    /// `[d_h, 1]`
    pub w_forget: Var<'t>,
    /// `[1, 1]`
    pub b_forget: Var<'t>,
    /// `[d_h, d_m]`
    pub w_cand: Var<'t>,
    /// `[1, d_m]`
    pub b_cand: Var<'t>,
    /// `[d_h, d_m]`
    pub w_read: Var<'t>,
    /// `[d_h, d_m]`
    pub w_addr: Var<'t>,
    /// `[d_h + d_m, d_h]`
    pub w_fuse: Var<'t>,
    /// `[1, d_h]`
    pub b_fuse: Var<'t>,
}

fn scalar_gate<'t>(h: Var<'t>, w: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
    let w_shape = w.shape();
    if w_shape.len() != 2 || w_shape[1] != 1 {
        return Err(Error::dim(
            "gate",
            format!("gate weights must be [d_h, 1], got {w_shape:?}"),
        ));
    }
    Ok(h.matmul(w)?.add_row(b)?.sigmoid())
}

/// `g_w = σ(h W_w + b_w)`, one scalar per batch row.
pub fn write_gate<'t>(h: Var<'t>, p: &GateParams<'t>) -> Result<Var<'t>> {
    scalar_gate(h, p.w_write, p.b_write)
}

/// `g_f = σ(h W_f + b_f)`, one scalar per batch row.
pub fn forget_gate<'t>(h: Var<'t>, p: &GateParams<'t>) -> Result<Var<'t>> {
    scalar_gate(h, p.w_forget, p.b_forget)
}

/// Softmax over slots of the bilinear scores `h W m_i`.
pub fn attention_weights<'t>(h: Var<'t>, memory: &MemoryState<'t>, w: Var<'t>) -> Result<Var<'t>> {
    let query = h.matmul(w)?;
    memory.slots().slot_scores(query)?.softmax()
}

/// Read weighting `a` over slots.
pub fn read_weights<'t>(
    h: Var<'t>,
    memory: &MemoryState<'t>,
    p: &GateParams<'t>,
) -> Result<Var<'t>> {
    attention_weights(h, memory, p.w_read)
}

/// Write weighting over slots, scored with its own matrix `W_a`.
pub fn write_weights<'t>(
    h: Var<'t>,
    memory: &MemoryState<'t>,
    p: &GateParams<'t>,
) -> Result<Var<'t>> {
    attention_weights(h, memory, p.w_addr)
}

/// `r = Σ_i a_i m_i`.
pub fn read_content<'t>(weights: Var<'t>, memory: &MemoryState<'t>) -> Result<Var<'t>> {
    weights.slot_read(memory.slots())
}

/// Candidate content `tanh(h W_c + b_c)`, entries in (-1, 1).
pub fn candidate<'t>(h: Var<'t>, w: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
    Ok(h.matmul(w)?.add_row(b)?.tanh())
}

/// Enhanced state `tanh([h, r] W_h + b_h)`.
pub fn fuse<'t>(h: Var<'t>, read: Var<'t>, p: &GateParams<'t>) -> Result<Var<'t>> {
    fuse_with(h, read, p.w_fuse, p.b_fuse)
}

pub(crate) fn fuse_with<'t>(h: Var<'t>, read: Var<'t>, w: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
    Ok(h.concat_cols(read)?.matmul(w)?.add_row(b)?.tanh())
}

fn check_unit_interval(name: &str, gate: &Tensor) -> Result<()> {
    match gate.data().iter().find(|g| !(0.0..=1.0).contains(*g)) {
        Some(g) => Err(Error::Contract(format!("{name} gate {g} outside [0, 1]"))),
        None => Ok(()),
    }
}

fn check_simplex(name: &str, weights: &Tensor) -> Result<()> {
    let n = *weights.shape().last().unwrap();
    for row in weights.data().chunks_exact(n) {
        let total: f64 = row.iter().sum();
        if row.iter().any(|w| *w < 0.0) || (total - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::Contract(format!(
                "{name} weights {row:?} are not a probability vector"
            )));
        }
    }
    Ok(())
}

/// Forgetting update `m_i <- (1 - g_f,i) m_i + g_w,i c`.
///
/// In uniform mode every slot uses the scalar gates directly. In addressed
/// mode the gates are scaled per slot by the write weighting. With `tied`
/// set the forget gate of each slot is replaced by its write gate, which
/// makes every slot update a convex combination.
pub fn write_update<'t>(
    memory: &MemoryState<'t>,
    g_write: Var<'t>,
    g_forget: Var<'t>,
    content: Var<'t>,
    weights: Var<'t>,
    mode: WriteMode,
    tied: bool,
) -> Result<MemoryState<'t>> {
    let (b, n) = (memory.batch(), memory.n());
    for (name, g) in [("write", g_write), ("forget", g_forget)] {
        let shape = g.shape();
        if shape != [b, 1] {
            return Err(Error::dim(
                "write_update",
                format!("{name} gate must be [{b}, 1], got {shape:?}"),
            ));
        }
        g.with_value(|t| check_unit_interval(name, t))?;
    }
    if weights.shape() != [b, n] {
        return Err(Error::dim(
            "write_update",
            format!(
                "write weights must be [{b}, {n}], got {:?}",
                weights.shape()
            ),
        ));
    }
    let per_slot = match mode {
        WriteMode::Addressed => {
            weights.with_value(|t| check_simplex("write", t))?;
            weights
        }
        WriteMode::Uniform => g_write.tape().leaf(Tensor::ones(&[b, n])),
    };
    let write = per_slot.mul_col(g_write)?;
    let forget = if tied {
        write
    } else {
        per_slot.mul_col(g_forget)?
    };
    MemoryState::new(memory.slots().slot_update(forget, write, content)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use crate::tensor::Tape;

    fn t(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    fn memory<'t>(tape: &'t Tape, slots: &[&[f64]]) -> MemoryState<'t> {
        let m = t(slots);
        let (n, d) = (m.shape()[0], m.shape()[1]);
        MemoryState::new(tape.leaf(m.reshape(&[1, n, d]).unwrap())).unwrap()
    }

    #[test]
    fn write_mode_parses_known_names_only() {
        assert_eq!(
            "addressed".parse::<WriteMode>().unwrap(),
            WriteMode::Addressed
        );
        assert_eq!("uniform".parse::<WriteMode>().unwrap(), WriteMode::Uniform);
        assert!("sideways".parse::<WriteMode>().unwrap_err().is_config());
    }

    #[test]
    fn gate_saturates_without_nan() {
        let tape = Tape::new();
        let h = tape.leaf(t(&[&[1.0, 1.0]]));
        let w = tape.leaf(t(&[&[0.0], &[0.0]]));
        let b = tape.leaf(t(&[&[-1000.0]]));
        let g = scalar_gate(h, w, b).unwrap().item();
        assert!(g.is_finite() && g < 1e-300);
    }

    #[test]
    fn gate_rejects_wrong_weight_shape() {
        let tape = Tape::new();
        let h = tape.leaf(t(&[&[1.0, 1.0]]));
        let w = tape.leaf(t(&[&[0.0, 1.0], &[0.0, 1.0]]));
        let b = tape.leaf(t(&[&[0.0]]));
        assert!(matches!(scalar_gate(h, w, b), Err(Error::Dimension { .. })));
    }

    #[test]
    fn read_of_identical_slots_is_uniform() {
        let tape = Tape::new();
        let m = memory(&tape, &[&[0.3, -0.2], &[0.3, -0.2], &[0.3, -0.2]]);
        let h = tape.leaf(t(&[&[0.5, 1.5]]));
        let w = tape.leaf(t(&[&[1.0, 2.0], &[-1.0, 0.5]]));
        let a = attention_weights(h, &m, w).unwrap().value();
        for v in a.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn read_weights_match_hand_scores() {
        // h = (1, 0), W = I so the scores are the first slot coordinates.
        let tape = Tape::new();
        let m = memory(&tape, &[&[2f64.ln(), 0.0], &[0.0, 5.0], &[0.0, -5.0]]);
        let h = tape.leaf(t(&[&[1.0, 0.0]]));
        let w = tape.leaf(t(&[&[1.0, 0.0], &[0.0, 1.0]]));
        let a = attention_weights(h, &m, w).unwrap().value();
        let expected = [0.5, 0.25, 0.25];
        for (x, e) in a.data().iter().zip(expected) {
            assert!((x - e).abs() < 1e-12);
        }
    }

    #[test]
    fn write_weights_for_scores_zero_and_ln3() {
        let tape = Tape::new();
        let m = memory(&tape, &[&[0.0], &[3f64.ln()]]);
        let h = tape.leaf(t(&[&[1.0]]));
        let w = tape.leaf(t(&[&[1.0]]));
        let a = attention_weights(h, &m, w).unwrap().value();
        assert!((a.data()[0] - 0.25).abs() < 1e-12);
        assert!((a.data()[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn zero_read_matrix_gives_uniform_weights() {
        let tape = Tape::new();
        let m = memory(&tape, &[&[9.0, -4.0], &[0.1, 7.0]]);
        let h = tape.leaf(t(&[&[3.0, -1.0]]));
        let w = tape.leaf(Tensor::zeros(&[2, 2]));
        let a = attention_weights(h, &m, w).unwrap().value();
        assert_eq!(a.data(), &[0.5, 0.5]);
    }

    #[test]
    fn read_content_cases() {
        let tape = Tape::new();
        let m = memory(&tape, &[&[1.0, 0.0], &[0.0, 1.0]]);
        let half = tape.leaf(t(&[&[0.5, 0.5]]));
        assert_eq!(read_content(half, &m).unwrap().value().data(), &[0.5, 0.5]);
        let onehot = tape.leaf(t(&[&[0.0, 1.0]]));
        assert_eq!(
            read_content(onehot, &m).unwrap().value().data(),
            &[0.0, 1.0]
        );

        let same = memory(&tape, &[&[0.25, -3.0], &[0.25, -3.0]]);
        let a = tape.leaf(t(&[&[0.3, 0.7]]));
        let r = read_content(a, &same).unwrap().value();
        assert!((r.data()[0] - 0.25).abs() < 1e-15 && (r.data()[1] + 3.0).abs() < 1e-15);
    }

    #[test]
    fn read_content_rejects_length_mismatch() {
        let tape = Tape::new();
        let m = memory(&tape, &[&[1.0, 0.0], &[0.0, 1.0]]);
        let a = tape.leaf(t(&[&[0.2, 0.3, 0.5]]));
        assert!(matches!(read_content(a, &m), Err(Error::Dimension { .. })));
    }

    #[test]
    fn candidate_of_zero_is_zero() {
        let tape = Tape::new();
        let h = tape.leaf(Tensor::zeros(&[1, 3]));
        let w = tape.leaf(Tensor::full(&[3, 2], 0.7));
        let b = tape.leaf(Tensor::zeros(&[1, 2]));
        assert_eq!(candidate(h, w, b).unwrap().value().data(), &[0.0, 0.0]);
    }

    fn gates<'t>(tape: &'t Tape, gw: f64, gf: f64) -> (Var<'t>, Var<'t>) {
        (tape.leaf(t(&[&[gw]])), tape.leaf(t(&[&[gf]])))
    }

    #[test]
    fn zero_gates_leave_memory_untouched() {
        for mode in [WriteMode::Addressed, WriteMode::Uniform] {
            let tape = Tape::new();
            let m = memory(&tape, &[&[0.1, -0.7], &[1e-300, 3.5]]);
            let (gw, gf) = gates(&tape, 0.0, 0.0);
            let c = tape.leaf(t(&[&[0.9, -0.9]]));
            let w = tape.leaf(t(&[&[0.4, 0.6]]));
            let out = write_update(&m, gw, gf, c, w, mode, false).unwrap();
            assert_eq!(out.value(), m.value());
        }
    }

    #[test]
    fn full_gates_in_uniform_mode_overwrite_every_slot() {
        let tape = Tape::new();
        let m = memory(&tape, &[&[0.1, -0.7], &[2.0, 3.5]]);
        let (gw, gf) = gates(&tape, 1.0, 1.0);
        let c = tape.leaf(t(&[&[0.9, -0.2]]));
        let w = tape.leaf(t(&[&[0.4, 0.6]]));
        let out = write_update(&m, gw, gf, c, w, WriteMode::Uniform, false).unwrap();
        assert_eq!(out.value().data(), &[0.9, -0.2, 0.9, -0.2]);
    }

    #[test]
    fn half_gates_uniform_by_hand() {
        let tape = Tape::new();
        let m = memory(&tape, &[&[2.0]]);
        let (gw, gf) = gates(&tape, 0.5, 0.5);
        let c = tape.leaf(t(&[&[0.0]]));
        let w = tape.leaf(t(&[&[1.0]]));
        let out = write_update(&m, gw, gf, c, w, WriteMode::Uniform, false).unwrap();
        assert_eq!(out.value().data(), &[1.0]);
    }

    #[test]
    fn addressed_update_scales_gates_per_slot() {
        let tape = Tape::new();
        let m = memory(&tape, &[&[1.0], &[1.0]]);
        let (gw, gf) = gates(&tape, 0.5, 0.2);
        let c = tape.leaf(t(&[&[0.8]]));
        let w = tape.leaf(t(&[&[0.25, 0.75]]));
        let out = write_update(&m, gw, gf, c, w, WriteMode::Addressed, false).unwrap();
        // slot 0: (1 - 0.05) + 0.125 * 0.8; slot 1: (1 - 0.15) + 0.375 * 0.8
        let e = [0.95 + 0.1, 0.85 + 0.3];
        for (x, y) in out.value().data().iter().zip(e) {
            assert!((x - y).abs() < 1e-15);
        }
        let tied = write_update(&m, gw, gf, c, w, WriteMode::Addressed, true).unwrap();
        let e = [0.875 + 0.1, 0.625 + 0.3];
        for (x, y) in tied.value().data().iter().zip(e) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn gates_outside_unit_interval_are_rejected() {
        let tape = Tape::new();
        let m = memory(&tape, &[&[2.0]]);
        let (gw, gf) = gates(&tape, 1.5, 0.5);
        let c = tape.leaf(t(&[&[0.0]]));
        let w = tape.leaf(t(&[&[1.0]]));
        assert!(matches!(
            write_update(&m, gw, gf, c, w, WriteMode::Uniform, false),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn init_schemes() {
        let mut rng = substream(1, "init");
        let z = init_memory(2, 3, InitScheme::Zeros, &mut rng).unwrap();
        assert_eq!(z, Tensor::zeros(&[2, 3]));
        let a = init_memory(4, 5, InitScheme::default(), &mut substream(9, "m")).unwrap();
        let b = init_memory(4, 5, InitScheme::default(), &mut substream(9, "m")).unwrap();
        assert_eq!(a, b);
        assert!(init_memory(0, 5, InitScheme::Zeros, &mut rng).is_err());
    }

    #[test]
    fn gaussian_init_mean_is_near_zero() {
        // n * d_m = 10^4 draws of N(0, 0.01^2): the sample mean has standard
        // error 0.01 / 100, so 4 standard errors is 4e-4.
        let m = init_memory(
            100,
            100,
            InitScheme::Gaussian { sigma: 0.01 },
            &mut substream(3, "init"),
        )
        .unwrap();
        let mean = m.data().iter().sum::<f64>() / m.numel() as f64;
        assert!(mean.abs() < 4.0 * 0.01 / 100.0, "mean {mean}");
    }
}
