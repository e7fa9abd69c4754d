//! Recurrent controller language model threading a slot memory through a
//! token sequence.
//!
//! Per step the order is fixed: embed the token, advance the gated
//! recurrent controller to `h_t`, read from the memory with `h_t`, fuse the
//! read content into `h'_t`, project `h'_t` to logits, and only then write
//! to the memory using the same `h_t` (read-before-write).

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::memory::{self, GateParams, InitScheme, MemoryState, WriteMode};
use crate::rng::substream;
use crate::tensor::{Tape, Tensor, Var};

/// Memory architecture variants compared in ablations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Gated writes, attention reads and forgetting updates.
    #[default]
    Gated,
    /// No gates; a round-robin pointer overwrites slot `t mod n`.
    FixedSlot,
    /// No persistent slots; reads attend over the last `n` hidden states.
    AttentionOnly,
    /// Separate key and value slots; reads score keys and return values.
    KeyValue,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Gated,
        Variant::FixedSlot,
        Variant::AttentionOnly,
        Variant::KeyValue,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Gated => "gated",
            Variant::FixedSlot => "fixed_slot",
            Variant::AttentionOnly => "attention_only",
            Variant::KeyValue => "key_value",
        }
    }

    pub fn has_gates(self) -> bool {
        matches!(self, Variant::Gated | Variant::KeyValue)
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown variant `{s}` (expected one of gated, fixed_slot, attention_only, key_value)"
                ))
            })
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MemoryInitKind {
    Zeros,
    #[default]
    Gaussian,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub slots: usize,
    pub slot_dim: usize,
    pub variant: Variant,
    pub write_mode: WriteMode,
    pub tied_gates: bool,
    pub memory_init: MemoryInitKind,
    pub memory_sigma: f64,
    /// Initial value of the write-gate bias.
    pub write_bias: f64,
    /// Initial value of the forget-gate bias.
    pub forget_bias: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 32,
            embed_dim: 32,
            hidden_dim: 32,
            slots: 16,
            slot_dim: 32,
            variant: Variant::Gated,
            write_mode: WriteMode::Addressed,
            tied_gates: false,
            memory_init: MemoryInitKind::Gaussian,
            memory_sigma: 0.01,
            write_bias: 0.0,
            forget_bias: 0.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("vocab_size", self.vocab_size),
            ("embed_dim", self.embed_dim),
            ("hidden_dim", self.hidden_dim),
            ("slots", self.slots),
            ("slot_dim", self.slot_dim),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("model.{name} must be at least 1")));
            }
        }
        if self.variant == Variant::AttentionOnly && self.slot_dim != self.hidden_dim {
            return Err(Error::Config(format!(
                "attention_only stores hidden states, so model.slot_dim ({}) must equal model.hidden_dim ({})",
                self.slot_dim, self.hidden_dim
            )));
        }
        if self.memory_init == MemoryInitKind::Gaussian
            && !(self.memory_sigma > 0.0 && self.memory_sigma.is_finite())
        {
            return Err(Error::Config(format!(
                "model.memory_sigma must be positive, got {}",
                self.memory_sigma
            )));
        }
        Ok(())
    }

    pub fn init_scheme(&self) -> InitScheme {
        match self.memory_init {
            MemoryInitKind::Zeros => InitScheme::Zeros,
            MemoryInitKind::Gaussian => InitScheme::Gaussian {
                sigma: self.memory_sigma,
            },
        }
    }

    /// Names and shapes of every trainable block, in canonical order.
    pub fn param_shapes(&self) -> Vec<(&'static str, Vec<usize>)> {
        let (v, e, h, n, m) = (
            self.vocab_size,
            self.embed_dim,
            self.hidden_dim,
            self.slots,
            self.slot_dim,
        );
        let mut shapes = vec![
            ("embedding", vec![v, e]),
            ("controller.w_x", vec![e, 3 * h]),
            ("controller.u_zr", vec![h, 2 * h]),
            ("controller.u_c", vec![h, h]),
            ("controller.b", vec![1, 3 * h]),
            ("memory.w_read", vec![h, m]),
            ("memory.w_fuse", vec![h + m, h]),
            ("memory.b_fuse", vec![1, h]),
        ];
        if self.variant != Variant::AttentionOnly {
            shapes.push(("memory.w_cand", vec![h, m]));
            shapes.push(("memory.b_cand", vec![1, m]));
        }
        if self.variant.has_gates() {
            shapes.extend([
                ("memory.w_write", vec![h, 1]),
                ("memory.b_write", vec![1, 1]),
                ("memory.w_forget", vec![h, 1]),
                ("memory.b_forget", vec![1, 1]),
                ("memory.w_addr", vec![h, m]),
            ]);
        }
        if self.variant == Variant::KeyValue {
            shapes.extend([
                ("kv.keys", vec![n, m]),
                ("kv.w_key", vec![h, m]),
                ("kv.b_key", vec![1, m]),
            ]);
        }
        shapes.push(("output.w", vec![h, v]));
        shapes.push(("output.b", vec![1, v]));
        shapes
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }
}

/// Trainable parameter blocks plus the fixed initial memory.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    /// Initial slot contents `[n, d_m]`; not trained.
    pub memory_init: Tensor,
}

impl ModelParams {
    /// Fresh parameters: matrices uniform in (-0.08, 0.08), biases zero
    /// (except the configured gate biases), each block from its own
    /// substream of `seed`.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for (name, shape) in config.param_shapes() {
            let numel: usize = shape.iter().product();
            let data = if is_bias(name) {
                let fill = match name {
                    "memory.b_write" => config.write_bias,
                    "memory.b_forget" => config.forget_bias,
                    _ => 0.0,
                };
                vec![fill; numel]
            } else {
                let mut rng = substream(seed, &format!("init/{name}"));
                (0..numel).map(|_| rng.random_range(-0.08..0.08)).collect()
            };
            names.push(name.to_string());
            tensors.push(Tensor::new(shape, data)?);
        }
        let memory_init = memory::init_memory(
            config.slots,
            config.slot_dim,
            config.init_scheme(),
            &mut substream(seed, "init/memory"),
        )?;
        Ok(Self {
            names,
            tensors,
            memory_init,
        })
    }

    pub fn from_blocks(blocks: Vec<(String, Tensor)>, memory_init: Tensor) -> Self {
        let (names, tensors) = blocks.into_iter().unzip();
        Self {
            names,
            tensors,
            memory_init,
        }
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index_of(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index_of(name).map(|i| &mut self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Checks that the blocks are exactly those `config` prescribes.
    pub fn check_against(&self, config: &ModelConfig) -> Result<()> {
        let expected = config.param_shapes();
        if expected.len() != self.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter blocks, found {}",
                expected.len(),
                self.len()
            )));
        }
        for ((name, shape), (have_name, have)) in expected.iter().zip(self.iter()) {
            if *name != have_name || shape.as_slice() != have.shape() {
                return Err(Error::Checkpoint(format!(
                    "expected block `{name}` {shape:?}, found `{have_name}` {:?}",
                    have.shape()
                )));
            }
        }
        if self.memory_init.shape() != [config.slots, config.slot_dim] {
            return Err(Error::Checkpoint(format!(
                "initial memory must be [{}, {}], found {:?}",
                config.slots,
                config.slot_dim,
                self.memory_init.shape()
            )));
        }
        Ok(())
    }
}

fn is_bias(name: &str) -> bool {
    let last = name.rsplit('.').next().unwrap_or(name);
    last == "b" || last.starts_with("b_")
}

/// Parameters placed on a tape for one forward pass.
pub struct Bound<'t> {
    /// Leaves in the same order as [`ModelParams::names`].
    pub leaves: Vec<Var<'t>>,
    pub memory_init: Var<'t>,
    embedding: Var<'t>,
    controller: ControllerParams<'t>,
    w_read: Var<'t>,
    w_fuse: Var<'t>,
    b_fuse: Var<'t>,
    cand: Option<(Var<'t>, Var<'t>)>,
    gates: Option<GateParams<'t>>,
    kv: Option<KeyValueParams<'t>>,
    w_out: Var<'t>,
    b_out: Var<'t>,
}

/// Gated recurrent cell weights. `w_x` packs the update, reset and
/// candidate input projections column-wise; `u_zr` packs the update and
/// reset recurrent projections.
#[derive(Clone, Copy, Debug)]
pub struct ControllerParams<'t> {
    pub w_x: Var<'t>,
    pub u_zr: Var<'t>,
    pub u_c: Var<'t>,
    pub b: Var<'t>,
}

#[derive(Clone, Copy)]
struct KeyValueParams<'t> {
    keys: Var<'t>,
    w_key: Var<'t>,
    b_key: Var<'t>,
}

impl<'t> Bound<'t> {
    pub fn gate_params(&self) -> Option<&GateParams<'t>> {
        self.gates.as_ref()
    }

    pub fn controller(&self) -> &ControllerParams<'t> {
        &self.controller
    }

    pub fn embedding(&self) -> Var<'t> {
        self.embedding
    }

    pub fn output(&self) -> (Var<'t>, Var<'t>) {
        (self.w_out, self.b_out)
    }
}

/// One controller step:
/// `z = σ(x W_xz + h U_z + b_z)`, `r = σ(x W_xr + h U_r + b_r)`,
/// `h̃ = tanh(x W_xc + (r ⊙ h) U_c + b_c)`, `h' = (1 - z) ⊙ h + z ⊙ h̃`.
pub fn controller_step<'t>(
    x: Var<'t>,
    h_prev: Var<'t>,
    p: &ControllerParams<'t>,
) -> Result<Var<'t>> {
    let d = h_prev.shape()[1];
    if p.u_c.shape() != [d, d] {
        return Err(Error::dim(
            "controller_step",
            format!(
                "state width {d} does not match recurrent weights {:?}",
                p.u_c.shape()
            ),
        ));
    }
    let gx = x.matmul(p.w_x)?.add_row(p.b)?;
    let gh = h_prev.matmul(p.u_zr)?;
    let z = gx.slice_cols(0, d)?.add(gh.slice_cols(0, d)?)?.sigmoid();
    let r = gx.slice_cols(d, d)?.add(gh.slice_cols(d, d)?)?.sigmoid();
    let cand = gx
        .slice_cols(2 * d, d)?
        .add(r.mul(h_prev)?.matmul(p.u_c)?)?
        .tanh();
    h_prev.add(z.mul(cand.sub(h_prev)?)?)
}

/// What the model carries between steps besides the controller state.
#[derive(Clone, Debug)]
pub enum MemoryCarry<'t> {
    Slots(MemoryState<'t>),
    KeyValue {
        keys: MemoryState<'t>,
        values: MemoryState<'t>,
    },
    /// Most recent hidden states, oldest first, at most `n` of them.
    Window(VecDeque<Var<'t>>),
}

#[derive(Clone, Debug)]
pub struct SequenceState<'t> {
    pub h: Var<'t>,
    pub memory: MemoryCarry<'t>,
    pub step: usize,
}

impl<'t> SequenceState<'t> {
    /// Slot (or value-slot) contents, if the variant has persistent slots.
    pub fn memory_value(&self) -> Option<Tensor> {
        match &self.memory {
            MemoryCarry::Slots(m) => Some(m.value()),
            MemoryCarry::KeyValue { values, .. } => Some(values.value()),
            MemoryCarry::Window(_) => None,
        }
    }
}

/// Per-step quantities of the memory unit, all `[B, ...]`.
#[derive(Clone, Copy, Debug)]
pub struct StepTrace<'t> {
    pub write_gate: Option<Var<'t>>,
    pub forget_gate: Option<Var<'t>>,
    pub read_weights: Option<Var<'t>>,
    pub write_weights: Option<Var<'t>>,
    pub read: Var<'t>,
}

pub struct StepOutput<'t> {
    pub state: SequenceState<'t>,
    pub logits: Option<Var<'t>>,
    pub trace: StepTrace<'t>,
}

/// Outputs of [`Model::run_sequence`], aligned with input positions.
pub struct SequenceOutput<'t> {
    pub logits: Vec<Option<Var<'t>>>,
    pub traces: Vec<StepTrace<'t>>,
    pub state: SequenceState<'t>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParams,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = ModelParams::init(&config, seed)?;
        Ok(Self { config, params })
    }

    pub fn from_parts(config: ModelConfig, params: ModelParams) -> Result<Self> {
        config.validate()?;
        params.check_against(&config)?;
        Ok(Self { config, params })
    }

    /// Places every parameter on `tape`.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        self.bind_with(tape, &self.params)
    }

    /// Like [`Model::bind`] but with replacement parameter values.
    pub fn bind_with<'t>(&self, tape: &'t Tape, params: &ModelParams) -> Bound<'t> {
        let leaves: Vec<Var<'t>> = params
            .tensors()
            .iter()
            .map(|t| tape.leaf(t.clone()))
            .collect();
        let get = |name: &str| -> Var<'t> {
            leaves[params
                .index_of(name)
                .unwrap_or_else(|| panic!("parameter block `{name}` missing"))]
        };
        let try_get = |name: &str| params.index_of(name).map(|i| leaves[i]);
        let w_read = get("memory.w_read");
        let w_fuse = get("memory.w_fuse");
        let b_fuse = get("memory.b_fuse");
        let cand = try_get("memory.w_cand").map(|w| (w, get("memory.b_cand")));
        let gates = try_get("memory.w_write").map(|w_write| GateParams {
            w_write,
            b_write: get("memory.b_write"),
            w_forget: get("memory.w_forget"),
            b_forget: get("memory.b_forget"),
            w_cand: get("memory.w_cand"),
            b_cand: get("memory.b_cand"),
            w_read,
            w_addr: get("memory.w_addr"),
            w_fuse,
            b_fuse,
        });
        let kv = try_get("kv.keys").map(|keys| KeyValueParams {
            keys,
            w_key: get("kv.w_key"),
            b_key: get("kv.b_key"),
        });
        Bound {
            memory_init: tape.leaf(params.memory_init.clone()),
            embedding: get("embedding"),
            controller: ControllerParams {
                w_x: get("controller.w_x"),
                u_zr: get("controller.u_zr"),
                u_c: get("controller.u_c"),
                b: get("controller.b"),
            },
            w_read,
            w_fuse,
            b_fuse,
            cand,
            gates,
            kv,
            w_out: get("output.w"),
            b_out: get("output.b"),
            leaves,
        }
    }

    pub fn initial_state<'t>(
        &self,
        tape: &'t Tape,
        bound: &Bound<'t>,
        batch: usize,
    ) -> Result<SequenceState<'t>> {
        if batch == 0 {
            return Err(Error::Contract(
                "batch must contain at least one sequence".into(),
            ));
        }
        let h = tape.leaf(Tensor::zeros(&[batch, self.config.hidden_dim]));
        let memory = match self.config.variant {
            Variant::Gated | Variant::FixedSlot => {
                MemoryCarry::Slots(MemoryState::from_initial(bound.memory_init, batch)?)
            }
            Variant::KeyValue => {
                let kv = bound.kv.as_ref().expect("key_value parameters bound");
                MemoryCarry::KeyValue {
                    keys: MemoryState::from_initial(kv.keys, batch)?,
                    values: MemoryState::from_initial(bound.memory_init, batch)?,
                }
            }
            Variant::AttentionOnly => MemoryCarry::Window(VecDeque::new()),
        };
        Ok(SequenceState { h, memory, step: 0 })
    }

    /// Advances every sequence in the batch by one token.
    pub fn step<'t>(
        &self,
        tape: &'t Tape,
        bound: &Bound<'t>,
        state: &SequenceState<'t>,
        tokens: &[usize],
        want_logits: bool,
    ) -> Result<StepOutput<'t>> {
        let cfg = &self.config;
        let batch = state.h.shape()[0];
        if tokens.len() != batch {
            return Err(Error::dim(
                "model_step",
                format!("{} tokens for a batch of {batch}", tokens.len()),
            ));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= cfg.vocab_size) {
            return Err(Error::Index(format!(
                "token {bad} out of range for vocabulary of {}",
                cfg.vocab_size
            )));
        }
        let x = bound.embedding.gather_rows(tokens)?;
        let h = controller_step(x, state.h, &bound.controller)?;

        // Read with h_t.
        let (read, read_weights) = match &state.memory {
            MemoryCarry::Slots(m) => {
                let a = memory::attention_weights(h, m, bound.w_read)?;
                (memory::read_content(a, m)?, Some(a))
            }
            MemoryCarry::KeyValue { keys, values } => {
                let a = memory::attention_weights(h, keys, bound.w_read)?;
                (memory::read_content(a, values)?, Some(a))
            }
            MemoryCarry::Window(window) if window.is_empty() => {
                (tape.leaf(Tensor::zeros(&[batch, cfg.slot_dim])), None)
            }
            MemoryCarry::Window(window) => {
                let items: Vec<Var<'t>> = window.iter().copied().collect();
                let m = MemoryState::new(Var::stack_slots(&items)?)?;
                let a = memory::attention_weights(h, &m, bound.w_read)?;
                (memory::read_content(a, &m)?, Some(a))
            }
        };
        let fused = memory::fuse_with(h, read, bound.w_fuse, bound.b_fuse)?;
        let logits = if want_logits {
            Some(fused.matmul(bound.w_out)?.add_row(bound.b_out)?)
        } else {
            None
        };

        // Then write with the same h_t.
        let mut trace = StepTrace {
            write_gate: None,
            forget_gate: None,
            read_weights,
            write_weights: None,
            read,
        };
        let memory = match &state.memory {
            MemoryCarry::Slots(m) if cfg.variant == Variant::Gated => {
                let p = bound.gates.as_ref().expect("gate parameters bound");
                let g_w = memory::write_gate(h, p)?;
                let g_f = memory::forget_gate(h, p)?;
                let c = memory::candidate(h, p.w_cand, p.b_cand)?;
                let w = memory::write_weights(h, m, p)?;
                trace.write_gate = Some(g_w);
                trace.forget_gate = Some(g_f);
                trace.write_weights = Some(w);
                MemoryCarry::Slots(memory::write_update(
                    m,
                    g_w,
                    g_f,
                    c,
                    w,
                    cfg.write_mode,
                    cfg.tied_gates,
                )?)
            }
            MemoryCarry::Slots(m) => {
                let (w_c, b_c) = bound.cand.expect("candidate parameters bound");
                let c = memory::candidate(h, w_c, b_c)?;
                let slot = state.step % m.n();
                let mut onehot = Tensor::zeros(&[batch, m.n()]);
                for b in 0..batch {
                    onehot.data_mut()[b * m.n() + slot] = 1.0;
                }
                let onehot = tape.leaf(onehot);
                trace.write_weights = Some(onehot);
                MemoryCarry::Slots(MemoryState::new(m.slots().slot_update(onehot, onehot, c)?)?)
            }
            MemoryCarry::KeyValue { keys, values } => {
                let p = bound.gates.as_ref().expect("gate parameters bound");
                let kv = bound.kv.as_ref().expect("key_value parameters bound");
                let g_w = memory::write_gate(h, p)?;
                let g_f = memory::forget_gate(h, p)?;
                let c_value = memory::candidate(h, p.w_cand, p.b_cand)?;
                let c_key = memory::candidate(h, kv.w_key, kv.b_key)?;
                let w = memory::write_weights(h, keys, p)?;
                trace.write_gate = Some(g_w);
                trace.forget_gate = Some(g_f);
                trace.write_weights = Some(w);
                MemoryCarry::KeyValue {
                    keys: memory::write_update(
                        keys,
                        g_w,
                        g_f,
                        c_key,
                        w,
                        cfg.write_mode,
                        cfg.tied_gates,
                    )?,
                    values: memory::write_update(
                        values,
                        g_w,
                        g_f,
                        c_value,
                        w,
                        cfg.write_mode,
                        cfg.tied_gates,
                    )?,
                }
            }
            MemoryCarry::Window(window) => {
                let mut window = window.clone();
                window.push_back(h);
                if window.len() > cfg.slots {
                    window.pop_front();
                }
                MemoryCarry::Window(window)
            }
        };
        Ok(StepOutput {
            state: SequenceState {
                h,
                memory,
                step: state.step + 1,
            },
            logits,
            trace,
        })
    }

    /// Unrolls a batch of equal-length sequences. `tokens[b][t]` is token
    /// `t` of sequence `b`. Logits are produced at positions where
    /// `want_logits(t)` holds.
    pub fn run_sequence<'t>(
        &self,
        tape: &'t Tape,
        bound: &Bound<'t>,
        tokens: &[Vec<usize>],
        want_logits: impl Fn(usize) -> bool,
    ) -> Result<SequenceOutput<'t>> {
        let len = tokens.first().map_or(0, Vec::len);
        if len == 0 {
            return Err(Error::Contract("token sequence must be non-empty".into()));
        }
        if tokens.iter().any(|s| s.len() != len) {
            return Err(Error::Contract(
                "sequences in a batch must have equal length".into(),
            ));
        }
        let mut state = self.initial_state(tape, bound, tokens.len())?;
        let mut logits = Vec::with_capacity(len);
        let mut traces = Vec::with_capacity(len);
        let mut column = vec![0; tokens.len()];
        for t in 0..len {
            for (c, seq) in column.iter_mut().zip(tokens) {
                *c = seq[t];
            }
            let out = self.step(tape, bound, &state, &column, want_logits(t))?;
            state = out.state;
            logits.push(out.logits);
            traces.push(out.trace);
        }
        Ok(SequenceOutput {
            logits,
            traces,
            state,
        })
    }
}
