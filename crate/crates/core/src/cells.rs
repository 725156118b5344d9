//! The recurrent cell zoo.
//!
//! Decay RNN (DRNN) and its two ablations, plus SRN/LSTM/GRU baselines, all
//! driven through one step interface. The DRNN update is
//!
//! ```text
//! c(t) = (relu(W) D) h(t-1) + U x(t) + b        D = diag(dale_signs)
//! h(t) = f(a h(t-1) + (1 - a) c(t))             a = sigmoid(alpha_logit)
//! ```
//!
//! The SDRNN drops the relu/sign constraint (raw `W h`), the Ab-DRNN drops
//! the recurrent matrix term entirely. The sign constraint is enforced in
//! the forward pass: `W` itself stays unconstrained, so any optimizer can
//! update it freely while every effective recurrent matrix it ever produces
//! keeps column-uniform signs.

use crate::tape::{logit, sigmoid_scalar, Tape, Var};
use crate::tensor::{NumericsError, Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CellKind {
    Srn,
    Drnn,
    Sdrnn,
    AbDrnn,
    Lstm,
    Gru,
}

impl CellKind {
    pub const ALL: [CellKind; 6] = [
        CellKind::Srn,
        CellKind::Drnn,
        CellKind::Sdrnn,
        CellKind::AbDrnn,
        CellKind::Lstm,
        CellKind::Gru,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CellKind::Srn => "srn",
            CellKind::Drnn => "drnn",
            CellKind::Sdrnn => "sdrnn",
            CellKind::AbDrnn => "abdrnn",
            CellKind::Lstm => "lstm",
            CellKind::Gru => "gru",
        }
    }

    pub fn parse(s: &str) -> Option<CellKind> {
        match s {
            "srn" => Some(CellKind::Srn),
            "drnn" => Some(CellKind::Drnn),
            "sdrnn" => Some(CellKind::Sdrnn),
            "abdrnn" => Some(CellKind::AbDrnn),
            "lstm" => Some(CellKind::Lstm),
            "gru" => Some(CellKind::Gru),
            _ => None,
        }
    }

    /// Rows of W/U/b relative to the hidden size (gate packing).
    fn gate_mult(self) -> usize {
        match self {
            CellKind::Lstm => 4,
            CellKind::Gru => 3,
            _ => 1,
        }
    }

    fn has_alpha(self) -> bool {
        matches!(self, CellKind::Drnn | CellKind::Sdrnn | CellKind::AbDrnn)
    }

    fn has_dale(self) -> bool {
        matches!(self, CellKind::Drnn)
    }

    fn has_recurrent_matrix(self) -> bool {
        !matches!(self, CellKind::AbDrnn)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Relu,
    /// No nonlinearity; used by the moving-average law tests.
    Identity,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
            Activation::Identity => "identity",
        }
    }

    pub fn parse(s: &str) -> Option<Activation> {
        match s {
            "tanh" => Some(Activation::Tanh),
            "relu" => Some(Activation::Relu),
            "identity" => Some(Activation::Identity),
            _ => None,
        }
    }
}

/// How the decay parameter is stored. `Sigmoid` keeps the raw value as a
/// logit and squashes on every use, so the decay stays inside (0,1) no
/// matter what the optimizer does to the raw number. `Linear` uses the raw
/// value directly (the reported-equivalent variant, kept behind this flag).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AlphaMode {
    Sigmoid,
    Linear,
}

impl AlphaMode {
    pub fn name(self) -> &'static str {
        match self {
            AlphaMode::Sigmoid => "sigmoid",
            AlphaMode::Linear => "linear",
        }
    }

    pub fn parse(s: &str) -> Option<AlphaMode> {
        match s {
            "sigmoid" => Some(AlphaMode::Sigmoid),
            "linear" => Some(AlphaMode::Linear),
            _ => None,
        }
    }
}

/// Which hidden units are inhibitory. The default puts the inhibitory block
/// at the end; `Permuted` scatters the same count across seeded positions
/// (the robustness knob for the choice of inhibitory set).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DalePlacement {
    Last,
    Permuted { seed: u64 },
}

/// Learnable arrays of one recurrent cell.
///
/// `w`, `u`, `b` are the recurrent, input, and bias arrays (gate-packed for
/// LSTM/GRU, absent for Ab-DRNN's `w`). `alpha_logit` is the raw decay
/// parameter; `dale_signs` the fixed +1/-1 column signs.
#[derive(Debug, Clone)]
pub struct CellParameters {
    pub kind: CellKind,
    pub hidden_size: usize,
    pub input_size: usize,
    pub activation: Activation,
    pub alpha_mode: AlphaMode,
    pub w: Option<Tensor>,
    pub u: Tensor,
    pub b: Tensor,
    pub alpha_logit: Option<Tensor>,
    pub dale_signs: Option<Vec<f64>>,
}

/// Number of inhibitory units for a hidden size: 20% of units, rounded,
/// but never fewer than one.
pub fn inhibitory_count(hidden_size: usize) -> usize {
    ((0.2 * hidden_size as f64).round() as usize).max(1)
}

/// Deterministic parameter initialization: W, U ~ uniform(-1/sqrt(h), 1/sqrt(h)),
/// b = 0, decay logit at logit(0.8), inhibitory signs on the last 20% of units.
pub fn init_parameters(kind: CellKind, hidden: usize, input: usize, seed: u64) -> CellParameters {
    init_parameters_with(kind, hidden, input, seed, Activation::Tanh, AlphaMode::Sigmoid, DalePlacement::Last)
}

pub fn init_parameters_with(
    kind: CellKind,
    hidden: usize,
    input: usize,
    seed: u64,
    activation: Activation,
    alpha_mode: AlphaMode,
    placement: DalePlacement,
) -> CellParameters {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bound = 1.0 / (hidden as f64).sqrt();
    let g = kind.gate_mult();
    let mut sample = |n: usize| -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-bound..bound)).collect()
    };

    let w = if kind.has_recurrent_matrix() {
        Some(Tensor::matrix(g * hidden, hidden, sample(g * hidden * hidden)).unwrap())
    } else {
        None
    };
    let u = Tensor::matrix(g * hidden, input, sample(g * hidden * input)).unwrap();
    let b = Tensor::zeros(&[g * hidden]);

    let alpha_logit = if kind.has_alpha() {
        let raw = match alpha_mode {
            AlphaMode::Sigmoid => logit(0.8),
            AlphaMode::Linear => 0.8,
        };
        Some(Tensor::scalar(raw).unwrap())
    } else {
        None
    };

    let dale_signs = if kind.has_dale() {
        Some(dale_sign_vector(hidden, placement))
    } else {
        None
    };

    CellParameters {
        kind,
        hidden_size: hidden,
        input_size: input,
        activation,
        alpha_mode,
        w,
        u,
        b,
        alpha_logit,
        dale_signs,
    }
}

fn dale_sign_vector(hidden: usize, placement: DalePlacement) -> Vec<f64> {
    let n_inhib = inhibitory_count(hidden);
    let mut signs = vec![1.0; hidden];
    match placement {
        DalePlacement::Last => {
            for s in signs.iter_mut().skip(hidden - n_inhib) {
                *s = -1.0;
            }
        }
        DalePlacement::Permuted { seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut idx: Vec<usize> = (0..hidden).collect();
            // Fisher-Yates; the first n_inhib entries become inhibitory.
            for i in (1..hidden).rev() {
                let j = rng.random_range(0..=i);
                idx.swap(i, j);
            }
            for &i in idx.iter().take(n_inhib) {
                signs[i] = -1.0;
            }
        }
    }
    signs
}

impl CellParameters {
    /// Current decay value. Under the sigmoid parameterization this is
    /// sigmoid(alpha_logit), structurally inside (0,1).
    pub fn alpha_value(&self) -> Option<f64> {
        self.alpha_logit.as_ref().map(|t| match self.alpha_mode {
            AlphaMode::Sigmoid => sigmoid_scalar(t.item()),
            AlphaMode::Linear => t.item(),
        })
    }
}

/// relu(W) with column j multiplied by dale_signs[j]. Column j of the
/// result is elementwise >= 0 where the sign is +1 and <= 0 where it is -1.
pub fn effective_recurrent_matrix(p: &CellParameters) -> Result<Tensor> {
    let w = p.w.as_ref().ok_or(NumericsError::ShapeMismatch {
        op: "effective_recurrent_matrix",
        lhs: vec![],
        rhs: vec![],
    })?;
    let signs = p
        .dale_signs
        .as_ref()
        .ok_or(NumericsError::ShapeMismatch {
            op: "effective_recurrent_matrix",
            lhs: vec![p.hidden_size],
            rhs: vec![],
        })?;
    let (rows, cols) = w.dims2();
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[i * cols + j] = w.at2(i, j).max(0.0) * signs[j];
        }
    }
    Tensor::matrix(rows, cols, out)
}

/// Hidden state of one cell; LSTM carries a second memory vector.
#[derive(Debug, Clone)]
pub struct CellState {
    pub h: Tensor,
    pub c_mem: Option<Tensor>,
}

impl CellState {
    pub fn zeros(kind: CellKind, hidden: usize) -> CellState {
        CellState {
            h: Tensor::zeros(&[hidden]),
            c_mem: matches!(kind, CellKind::Lstm).then(|| Tensor::zeros(&[hidden])),
        }
    }
}

/// Tape nodes for one cell's state.
#[derive(Debug, Clone, Copy)]
pub struct TapedState {
    pub h: Var,
    pub c_mem: Option<Var>,
}

/// Parameter leaves of one cell registered on a tape, in checkpoint order.
#[derive(Debug, Clone, Copy)]
pub struct CellLeaves {
    pub w: Option<Var>,
    pub u: Var,
    pub b: Var,
    pub alpha_logit: Option<Var>,
}

enum Hoisted {
    /// DRNN / SDRNN / Ab-DRNN: optional recurrent matrix plus the decay blend.
    Blend {
        rec: Option<Var>,
        alpha: Var,
        one_minus_alpha: Var,
    },
    Srn {
        w: Var,
    },
    Lstm {
        w: Var,
        u: Var,
    },
    /// GRU gate blocks sliced out of the packed arrays, order r, z, n.
    Gru {
        wr: Var,
        wz: Var,
        wn: Var,
        ur: Var,
        uz: Var,
        un: Var,
        br: Var,
        bz: Var,
        bn: Var,
    },
}

/// A cell wired onto a tape: leaves registered once, step-invariant nodes
/// (effective recurrent matrix, decay value, gate blocks) hoisted so each
/// timestep only records the per-step work.
pub struct TapedCell {
    kind: CellKind,
    activation: Activation,
    hidden: usize,
    pub leaves: CellLeaves,
    u: Var,
    b: Var,
    hoisted: Hoisted,
}

impl TapedCell {
    pub fn register(p: &CellParameters, tape: &mut Tape) -> Result<TapedCell> {
        let w = p.w.as_ref().map(|w| tape.leaf(w.clone())).transpose()?;
        let u = tape.leaf(p.u.clone())?;
        let b = tape.leaf(p.b.clone())?;
        let alpha_logit = p
            .alpha_logit
            .as_ref()
            .map(|a| tape.leaf(a.clone()))
            .transpose()?;
        let leaves = CellLeaves {
            w,
            u,
            b,
            alpha_logit,
        };

        let h = p.hidden_size;
        let hoisted = match p.kind {
            CellKind::Drnn | CellKind::Sdrnn | CellKind::AbDrnn => {
                let rec = match p.kind {
                    CellKind::Drnn => {
                        let w = w.expect("drnn has a recurrent matrix");
                        let r = tape.relu(w)?;
                        let signs = p.dale_signs.as_ref().expect("drnn has dale signs");
                        Some(tape.scale_columns(r, signs)?)
                    }
                    CellKind::Sdrnn => w,
                    _ => None,
                };
                let raw = alpha_logit.expect("decay cells have an alpha leaf");
                let alpha = match p.alpha_mode {
                    AlphaMode::Sigmoid => tape.sigmoid(raw)?,
                    AlphaMode::Linear => raw,
                };
                let one_minus_alpha = tape.one_minus(alpha)?;
                Hoisted::Blend {
                    rec,
                    alpha,
                    one_minus_alpha,
                }
            }
            CellKind::Srn => Hoisted::Srn {
                w: w.expect("srn has a recurrent matrix"),
            },
            CellKind::Lstm => Hoisted::Lstm {
                w: w.expect("lstm has a recurrent matrix"),
                u,
            },
            CellKind::Gru => {
                let w = w.expect("gru has a recurrent matrix");
                let block = |tape: &mut Tape, m: Var, g: usize| tape.slice(m, g * h * h, &[h, h]);
                let wr = block(tape, w, 0)?;
                let wz = block(tape, w, 1)?;
                let wn = block(tape, w, 2)?;
                let ublock = |tape: &mut Tape, g: usize, input: usize| {
                    tape.slice(u, g * h * input, &[h, input])
                };
                let ur = ublock(tape, 0, p.input_size)?;
                let uz = ublock(tape, 1, p.input_size)?;
                let un = ublock(tape, 2, p.input_size)?;
                let bblock = |tape: &mut Tape, g: usize| tape.slice(b, g * h, &[h]);
                let br = bblock(tape, 0)?;
                let bz = bblock(tape, 1)?;
                let bn = bblock(tape, 2)?;
                Hoisted::Gru {
                    wr,
                    wz,
                    wn,
                    ur,
                    uz,
                    un,
                    br,
                    bz,
                    bn,
                }
            }
        };

        Ok(TapedCell {
            kind: p.kind,
            activation: p.activation,
            hidden: p.hidden_size,
            leaves,
            u,
            b,
            hoisted,
        })
    }

    pub fn kind(&self) -> CellKind {
        self.kind
    }

    pub fn init_state(&self, tape: &mut Tape) -> Result<TapedState> {
        Ok(TapedState {
            h: tape.leaf(Tensor::zeros(&[self.hidden]))?,
            c_mem: match self.kind {
                CellKind::Lstm => Some(tape.leaf(Tensor::zeros(&[self.hidden]))?),
                _ => None,
            },
        })
    }

    fn activate(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        match self.activation {
            Activation::Tanh => tape.tanh(x),
            Activation::Relu => tape.relu(x),
            Activation::Identity => Ok(x),
        }
    }

    /// One timestep. Records the update for this cell kind and returns the
    /// next state.
    pub fn step(&self, tape: &mut Tape, state: &TapedState, x: Var) -> Result<TapedState> {
        let h_prev = state.h;
        match &self.hoisted {
            Hoisted::Blend {
                rec,
                alpha,
                one_minus_alpha,
            } => {
                let ux = tape.matvec(self.u, x)?;
                let mut c = tape.add(ux, self.b)?;
                if let Some(rec) = rec {
                    let wh = tape.matvec(*rec, h_prev)?;
                    c = tape.add(wh, c)?;
                }
                let decayed = tape.broadcast_mul(*alpha, h_prev)?;
                let driven = tape.broadcast_mul(*one_minus_alpha, c)?;
                let pre = tape.add(decayed, driven)?;
                let h = self.activate(tape, pre)?;
                Ok(TapedState { h, c_mem: None })
            }
            Hoisted::Srn { w } => {
                let wh = tape.matvec(*w, h_prev)?;
                let ux = tape.matvec(self.u, x)?;
                let s = tape.add(wh, ux)?;
                let pre = tape.add(s, self.b)?;
                let h = self.activate(tape, pre)?;
                Ok(TapedState { h, c_mem: None })
            }
            Hoisted::Lstm { w, u } => {
                let hdim = self.hidden;
                let wh = tape.matvec(*w, h_prev)?;
                let ux = tape.matvec(*u, x)?;
                let s = tape.add(wh, ux)?;
                let pre = tape.add(s, self.b)?;
                // Gate packing order: input, forget, candidate, output.
                let pi = tape.slice(pre, 0, &[hdim])?;
                let pf = tape.slice(pre, hdim, &[hdim])?;
                let pg = tape.slice(pre, 2 * hdim, &[hdim])?;
                let po = tape.slice(pre, 3 * hdim, &[hdim])?;
                let i = tape.sigmoid(pi)?;
                let f = tape.sigmoid(pf)?;
                let g = tape.tanh(pg)?;
                let o = tape.sigmoid(po)?;
                let c_prev = state.c_mem.expect("lstm state carries c_mem");
                let fc = tape.mul(f, c_prev)?;
                let ig = tape.mul(i, g)?;
                let c = tape.add(fc, ig)?;
                let tc = tape.tanh(c)?;
                let h = tape.mul(o, tc)?;
                Ok(TapedState { h, c_mem: Some(c) })
            }
            Hoisted::Gru {
                wr,
                wz,
                wn,
                ur,
                uz,
                un,
                br,
                bz,
                bn,
            } => {
                let gate = |tape: &mut Tape, w: Var, uu: Var, bb: Var| -> Result<Var> {
                    let wh = tape.matvec(w, h_prev)?;
                    let ux = tape.matvec(uu, x)?;
                    let s = tape.add(wh, ux)?;
                    tape.add(s, bb)
                };
                let pr = gate(tape, *wr, *ur, *br)?;
                let r = tape.sigmoid(pr)?;
                let pz = gate(tape, *wz, *uz, *bz)?;
                let z = tape.sigmoid(pz)?;
                let rh = tape.mul(r, h_prev)?;
                let wrh = tape.matvec(*wn, rh)?;
                let uxn = tape.matvec(*un, x)?;
                let sn = tape.add(wrh, uxn)?;
                let pn = tape.add(sn, *bn)?;
                let n = tape.tanh(pn)?;
                let omz = tape.one_minus(z)?;
                let a = tape.mul(omz, n)?;
                let keep = tape.mul(z, h_prev)?;
                let h = tape.add(a, keep)?;
                Ok(TapedState { h, c_mem: None })
            }
        }
    }
}

/// Run one eager step of a given kind through a scratch tape. The taped
/// path is the single implementation; this wrapper just reads the values
/// back out.
fn eager_step(kind: CellKind, p: &CellParameters, state: &CellState, x: &Tensor) -> Result<CellState> {
    let mut q = p.clone();
    q.kind = kind;
    if !kind.has_dale() {
        q.dale_signs = None;
    } else if q.dale_signs.is_none() {
        return Err(NumericsError::ShapeMismatch {
            op: "drnn_step: parameters carry no dale signs",
            lhs: vec![p.hidden_size],
            rhs: vec![],
        });
    }
    let mut tape = Tape::new();
    let cell = TapedCell::register(&q, &mut tape)?;
    let s0 = TapedState {
        h: tape.leaf(state.h.clone())?,
        c_mem: state.c_mem.as_ref().map(|c| tape.leaf(c.clone())).transpose()?,
    };
    let xv = tape.leaf(x.clone())?;
    let s1 = cell.step(&mut tape, &s0, xv)?;
    Ok(CellState {
        h: tape.value(s1.h).clone(),
        c_mem: s1.c_mem.map(|c| tape.value(c).clone()),
    })
}

/// Decay RNN step: relu/sign-constrained recurrence blended with the
/// previous state through the decay gate.
pub fn drnn_step(p: &CellParameters, h_prev: &CellState, x: &Tensor) -> Result<CellState> {
    eager_step(CellKind::Drnn, p, h_prev, x)
}

/// Slacked Decay RNN step: raw `W h` recurrence, no sign constraint.
pub fn sdrnn_step(p: &CellParameters, h_prev: &CellState, x: &Tensor) -> Result<CellState> {
    eager_step(CellKind::Sdrnn, p, h_prev, x)
}

/// Ablated Decay RNN step: no recurrent matrix term at all.
pub fn abdrnn_step(p: &CellParameters, h_prev: &CellState, x: &Tensor) -> Result<CellState> {
    eager_step(CellKind::AbDrnn, p, h_prev, x)
}

/// Elman step: f(W h + U x + b).
pub fn srn_step(p: &CellParameters, h_prev: &CellState, x: &Tensor) -> Result<CellState> {
    eager_step(CellKind::Srn, p, h_prev, x)
}

pub fn lstm_step(p: &CellParameters, state: &CellState, x: &Tensor) -> Result<CellState> {
    eager_step(CellKind::Lstm, p, state, x)
}

pub fn gru_step(p: &CellParameters, state: &CellState, x: &Tensor) -> Result<CellState> {
    eager_step(CellKind::Gru, p, state, x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vecs_close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    fn seeded(kind: CellKind, hidden: usize, input: usize, seed: u64) -> CellParameters {
        init_parameters(kind, hidden, input, seed)
    }

    #[test]
    fn init_is_deterministic_bit_for_bit() {
        for kind in CellKind::ALL {
            let a = seeded(kind, 6, 3, 99);
            let b = seeded(kind, 6, 3, 99);
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(a.w.as_ref().map(&bits), b.w.as_ref().map(&bits));
            assert_eq!(bits(&a.u), bits(&b.u));
            assert_eq!(
                a.alpha_logit.as_ref().map(&bits),
                b.alpha_logit.as_ref().map(&bits)
            );
            assert_eq!(a.dale_signs, b.dale_signs);
        }
    }

    #[test]
    fn inhibitory_counts_follow_the_rounding_rule() {
        assert_eq!(inhibitory_count(50), 10);
        assert_eq!(inhibitory_count(3), 1);
        assert_eq!(inhibitory_count(5), 1);
        assert_eq!(inhibitory_count(2), 1);
        let p = seeded(CellKind::Drnn, 50, 4, 1);
        let signs = p.dale_signs.unwrap();
        assert_eq!(signs.iter().filter(|&&s| s == -1.0).count(), 10);
        assert!(signs[..40].iter().all(|&s| s == 1.0));
        assert!(signs[40..].iter().all(|&s| s == -1.0));
    }

    #[test]
    fn decay_value_initializes_to_point_eight() {
        let p = seeded(CellKind::Drnn, 4, 2, 7);
        assert!((p.alpha_value().unwrap() - 0.8).abs() < 1e-12);
        assert!((p.alpha_logit.as_ref().unwrap().item() - 1.3862944).abs() < 1e-7);
    }

    #[test]
    fn effective_matrix_of_all_negative_w_is_zero() {
        let mut p = seeded(CellKind::Drnn, 3, 2, 5);
        p.w = Some(Tensor::matrix(3, 3, vec![-0.5; 9]).unwrap());
        let eff = effective_recurrent_matrix(&p).unwrap();
        assert_eq!(eff.data(), &[0.0; 9]);
    }

    #[test]
    fn hidden_five_has_exactly_one_inhibitory_column_the_last() {
        let p = seeded(CellKind::Drnn, 5, 2, 11);
        let signs = p.dale_signs.as_ref().unwrap();
        assert_eq!(signs.iter().filter(|&&s| s == -1.0).count(), 1);
        assert_eq!(signs[4], -1.0);
        let eff = effective_recurrent_matrix(&p).unwrap();
        for i in 0..5 {
            for j in 0..4 {
                assert!(eff.at2(i, j) >= 0.0);
            }
            assert!(eff.at2(i, 4) <= 0.0);
        }
    }

    #[test]
    fn effective_matrix_matches_direct_elementwise_recomputation() {
        let p = seeded(CellKind::Drnn, 4, 2, 123);
        let w = p.w.as_ref().unwrap();
        let signs = p.dale_signs.as_ref().unwrap().clone();
        let eff = effective_recurrent_matrix(&p).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let expect = if w.at2(i, j) > 0.0 { w.at2(i, j) } else { 0.0 } * signs[j];
                assert_eq!(eff.at2(i, j), expect);
                if j < 3 {
                    assert!(eff.at2(i, j) >= 0.0);
                } else {
                    assert!(eff.at2(i, j) <= 0.0);
                }
                assert!((eff.at2(i, j).abs() - w.at2(i, j).max(0.0)).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn zero_everything_is_a_fixed_point_of_drnn() {
        let mut p = seeded(CellKind::Drnn, 3, 2, 2);
        p.w = Some(Tensor::zeros(&[3, 3]));
        p.u = Tensor::zeros(&[3, 2]);
        p.b = Tensor::zeros(&[3]);
        let s = CellState::zeros(CellKind::Drnn, 3);
        let x = Tensor::vector(vec![0.4, -0.3]).unwrap();
        let next = drnn_step(&p, &s, &x).unwrap();
        assert_eq!(next.h.data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn constant_drive_obeys_the_moving_average_law() {
        // f = identity, W = 0: h(t) - cbar = alpha^t (h(0) - cbar).
        let mut p = seeded(CellKind::Drnn, 2, 1, 3);
        p.activation = Activation::Identity;
        p.w = Some(Tensor::zeros(&[2, 2]));
        p.u = Tensor::matrix(2, 1, vec![0.3, -0.2]).unwrap();
        p.b = Tensor::vector(vec![0.1, 0.5]).unwrap();
        let x = Tensor::vector(vec![1.0]).unwrap();
        let cbar = [0.3 + 0.1, -0.2 + 0.5];
        let alpha = p.alpha_value().unwrap();
        let h0 = [0.9, -0.4];
        let mut state = CellState {
            h: Tensor::vector(h0.to_vec()).unwrap(),
            c_mem: None,
        };
        for t in 1..=50 {
            state = drnn_step(&p, &state, &x).unwrap();
            for i in 0..2 {
                let expect = cbar[i] + alpha.powi(t) * (h0[i] - cbar[i]);
                assert!(
                    (state.h.at(i) - expect).abs() < 1e-12,
                    "t={t} i={i}: {} vs {expect}",
                    state.h.at(i)
                );
            }
        }
    }

    #[test]
    fn drnn_matches_hand_evaluated_scalars() {
        // hidden 2, input 1, alpha 0.8, tanh. The oracle below is a direct
        // transcription of the update equations over plain f64 scalars.
        let w: [[f64; 2]; 2] = [[0.2, -0.4], [0.5, 0.3]];
        let signs = [1.0, -1.0];
        let u = [0.7, -0.6];
        let b = [0.05, -0.1];
        let h0 = [0.3, -0.2];
        let xs = [0.5, -1.0, 0.25];
        let alpha = 0.8f64;

        let mut h = h0;
        for x in xs {
            let mut c = [0.0f64; 2];
            for i in 0..2 {
                let mut acc = u[i] * x + b[i];
                for j in 0..2 {
                    acc += w[i][j].max(0.0) * signs[j] * h[j];
                }
                c[i] = acc;
            }
            for i in 0..2 {
                h[i] = (alpha * h[i] + (1.0 - alpha) * c[i]).tanh();
            }
        }

        let p = CellParameters {
            kind: CellKind::Drnn,
            hidden_size: 2,
            input_size: 1,
            activation: Activation::Tanh,
            alpha_mode: AlphaMode::Sigmoid,
            w: Some(Tensor::matrix(2, 2, vec![0.2, -0.4, 0.5, 0.3]).unwrap()),
            u: Tensor::matrix(2, 1, u.to_vec()).unwrap(),
            b: Tensor::vector(b.to_vec()).unwrap(),
            alpha_logit: Some(Tensor::scalar(logit(0.8)).unwrap()),
            dale_signs: Some(signs.to_vec()),
        };
        let mut state = CellState {
            h: Tensor::vector(h0.to_vec()).unwrap(),
            c_mem: None,
        };
        for x in xs {
            let xv = Tensor::vector(vec![x]).unwrap();
            state = drnn_step(&p, &state, &xv).unwrap();
        }
        assert!(vecs_close(state.h.data(), &h, 1e-12));
    }

    #[test]
    fn sdrnn_coincides_with_drnn_on_nonnegative_w_and_positive_signs() {
        let mut p = seeded(CellKind::Drnn, 4, 2, 17);
        let w = p.w.as_ref().unwrap().clone();
        let nonneg: Vec<f64> = w.data().iter().map(|v| v.abs()).collect();
        p.w = Some(Tensor::matrix(4, 4, nonneg).unwrap());
        p.dale_signs = Some(vec![1.0; 4]);
        let x = Tensor::vector(vec![0.3, -0.8]).unwrap();
        let s = CellState {
            h: Tensor::vector(vec![0.1, -0.2, 0.4, 0.0]).unwrap(),
            c_mem: None,
        };
        let a = drnn_step(&p, &s, &x).unwrap();
        let b = sdrnn_step(&p, &s, &x).unwrap();
        assert!(vecs_close(a.h.data(), b.h.data(), 1e-12));
    }

    #[test]
    fn sdrnn_with_zero_w_equals_abdrnn_exactly() {
        let mut p = seeded(CellKind::Sdrnn, 3, 2, 23);
        p.w = Some(Tensor::zeros(&[3, 3]));
        let x = Tensor::vector(vec![-0.4, 0.9]).unwrap();
        let s = CellState {
            h: Tensor::vector(vec![0.2, 0.1, -0.5]).unwrap(),
            c_mem: None,
        };
        let a = sdrnn_step(&p, &s, &x).unwrap();
        let b = abdrnn_step(&p, &s, &x).unwrap();
        assert_eq!(a.h.data(), b.h.data());
    }

    #[test]
    fn abdrnn_pure_decay_without_drive() {
        // x = 0, b = 0, f = identity: h(t) = alpha^t h(0).
        let mut p = seeded(CellKind::AbDrnn, 2, 1, 31);
        p.activation = Activation::Identity;
        p.u = Tensor::zeros(&[2, 1]);
        p.b = Tensor::zeros(&[2]);
        let alpha = p.alpha_value().unwrap();
        let h0 = [0.7, -0.3];
        let mut s = CellState {
            h: Tensor::vector(h0.to_vec()).unwrap(),
            c_mem: None,
        };
        let x = Tensor::vector(vec![0.0]).unwrap();
        for t in 1..=10 {
            s = abdrnn_step(&p, &s, &x).unwrap();
            for i in 0..2 {
                assert!((s.h.at(i) - alpha.powi(t) * h0[i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn srn_is_the_alpha_to_zero_limit_of_sdrnn() {
        let mut p = seeded(CellKind::Sdrnn, 4, 3, 41);
        p.alpha_logit = Some(Tensor::scalar(-40.0).unwrap());
        let x = Tensor::vector(vec![0.2, -0.1, 0.6]).unwrap();
        let s = CellState {
            h: Tensor::vector(vec![0.3, -0.3, 0.1, 0.9]).unwrap(),
            c_mem: None,
        };
        let a = sdrnn_step(&p, &s, &x).unwrap();
        let b = srn_step(&p, &s, &x).unwrap();
        assert!(vecs_close(a.h.data(), b.h.data(), 1e-12));
    }

    #[test]
    fn srn_identity_input_case() {
        let p = CellParameters {
            kind: CellKind::Srn,
            hidden_size: 1,
            input_size: 1,
            activation: Activation::Tanh,
            alpha_mode: AlphaMode::Sigmoid,
            w: Some(Tensor::zeros(&[1, 1])),
            u: Tensor::matrix(1, 1, vec![1.0]).unwrap(),
            b: Tensor::zeros(&[1]),
            alpha_logit: None,
            dale_signs: None,
        };
        let s = CellState::zeros(CellKind::Srn, 1);
        let x = Tensor::vector(vec![0.5]).unwrap();
        let next = srn_step(&p, &s, &x).unwrap();
        assert!((next.h.at(0) - 0.5f64.tanh()).abs() < 1e-15);
    }

    #[test]
    fn lstm_zero_weights_closed_form() {
        let mut p = seeded(CellKind::Lstm, 3, 2, 47);
        p.w = Some(Tensor::zeros(&[12, 3]));
        p.u = Tensor::zeros(&[12, 2]);
        p.b = Tensor::zeros(&[12]);
        let c0 = [0.6, -0.4, 0.2];
        let s = CellState {
            h: Tensor::vector(vec![0.3, 0.3, 0.3]).unwrap(),
            c_mem: Some(Tensor::vector(c0.to_vec()).unwrap()),
        };
        let x = Tensor::vector(vec![1.0, -1.0]).unwrap();
        let next = lstm_step(&p, &s, &x).unwrap();
        for i in 0..3 {
            let c_next = 0.5 * c0[i];
            assert!((next.c_mem.as_ref().unwrap().at(i) - c_next).abs() < 1e-15);
            assert!((next.h.at(i) - 0.5 * c_next.tanh()).abs() < 1e-15);
        }
    }

    #[test]
    fn gru_zero_weights_zero_state_stays_zero() {
        let mut p = seeded(CellKind::Gru, 3, 2, 53);
        p.w = Some(Tensor::zeros(&[9, 3]));
        p.u = Tensor::zeros(&[9, 2]);
        p.b = Tensor::zeros(&[9]);
        let s = CellState::zeros(CellKind::Gru, 3);
        let x = Tensor::vector(vec![0.7, -0.2]).unwrap();
        let next = gru_step(&p, &s, &x).unwrap();
        assert_eq!(next.h.data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn lstm_and_gru_match_hand_evaluated_scalars() {
        // Scalar transcription of the gated updates, hidden 2, input 1.
        let hidden = 2;
        let p_lstm = seeded(CellKind::Lstm, hidden, 1, 61);
        let p_gru = seeded(CellKind::Gru, hidden, 1, 67);
        let xs = [0.4, -0.9];
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());

        // LSTM oracle.
        {
            let w = p_lstm.w.as_ref().unwrap();
            let u = &p_lstm.u;
            let b = &p_lstm.b;
            let mut h = [0.0f64; 2];
            let mut c = [0.0f64; 2];
            for x in xs {
                let mut pre = [0.0f64; 8];
                for r in 0..8 {
                    let mut acc = u.at2(r, 0) * x + b.at(r);
                    for j in 0..2 {
                        acc += w.at2(r, j) * h[j];
                    }
                    pre[r] = acc;
                }
                let mut hn = [0.0f64; 2];
                let mut cn = [0.0f64; 2];
                for i in 0..2 {
                    let ig = sig(pre[i]);
                    let fg = sig(pre[hidden + i]);
                    let g = pre[2 * hidden + i].tanh();
                    let og = sig(pre[3 * hidden + i]);
                    cn[i] = fg * c[i] + ig * g;
                    hn[i] = og * cn[i].tanh();
                }
                h = hn;
                c = cn;
            }
            let mut s = CellState::zeros(CellKind::Lstm, hidden);
            for x in xs {
                let xv = Tensor::vector(vec![x]).unwrap();
                s = lstm_step(&p_lstm, &s, &xv).unwrap();
            }
            assert!(vecs_close(s.h.data(), &h, 1e-12));
            assert!(vecs_close(s.c_mem.as_ref().unwrap().data(), &c, 1e-12));
        }

        // GRU oracle.
        {
            let w = p_gru.w.as_ref().unwrap();
            let u = &p_gru.u;
            let b = &p_gru.b;
            let mut h = [0.0f64; 2];
            for x in xs {
                let block = |g: usize, i: usize, v: &[f64; 2]| -> f64 {
                    let r = g * hidden + i;
                    let mut acc = u.at2(r, 0) * x + b.at(r);
                    for j in 0..2 {
                        acc += w.at2(r, j) * v[j];
                    }
                    acc
                };
                let mut r = [0.0f64; 2];
                let mut z = [0.0f64; 2];
                for i in 0..2 {
                    r[i] = sig(block(0, i, &h));
                    z[i] = sig(block(1, i, &h));
                }
                let rh = [r[0] * h[0], r[1] * h[1]];
                let mut hn = [0.0f64; 2];
                for i in 0..2 {
                    let n = block(2, i, &rh).tanh();
                    hn[i] = (1.0 - z[i]) * n + z[i] * h[i];
                }
                h = hn;
            }
            let mut s = CellState::zeros(CellKind::Gru, hidden);
            for x in xs {
                let xv = Tensor::vector(vec![x]).unwrap();
                s = gru_step(&p_gru, &s, &xv).unwrap();
            }
            assert!(vecs_close(s.h.data(), &h, 1e-12));
        }
    }

    #[test]
    fn sdrnn_and_srn_match_hand_evaluated_scalars() {
        let p = seeded(CellKind::Sdrnn, 2, 1, 71);
        let w = p.w.as_ref().unwrap();
        let u = &p.u;
        let b = &p.b;
        let alpha = p.alpha_value().unwrap();
        let xs = [0.3, -0.5, 0.8];

        let run_oracle = |use_blend: bool| -> [f64; 2] {
            let mut h = [0.0f64; 2];
            for x in xs {
                let mut c = [0.0f64; 2];
                for i in 0..2 {
                    let mut acc = u.at2(i, 0) * x + b.at(i);
                    for j in 0..2 {
                        acc += w.at2(i, j) * h[j];
                    }
                    c[i] = acc;
                }
                for i in 0..2 {
                    let pre = if use_blend {
                        alpha * h[i] + (1.0 - alpha) * c[i]
                    } else {
                        c[i]
                    };
                    h[i] = pre.tanh();
                }
            }
            h
        };

        let mut s = CellState::zeros(CellKind::Sdrnn, 2);
        for x in xs {
            let xv = Tensor::vector(vec![x]).unwrap();
            s = sdrnn_step(&p, &s, &xv).unwrap();
        }
        assert!(vecs_close(s.h.data(), &run_oracle(true), 1e-12));

        let mut s = CellState::zeros(CellKind::Srn, 2);
        for x in xs {
            let xv = Tensor::vector(vec![x]).unwrap();
            s = srn_step(&p, &s, &xv).unwrap();
        }
        assert!(vecs_close(s.h.data(), &run_oracle(false), 1e-12));
    }

    #[test]
    fn abdrnn_matches_hand_evaluated_scalars() {
        let p = seeded(CellKind::AbDrnn, 2, 1, 73);
        let u = &p.u;
        let b = &p.b;
        let alpha = p.alpha_value().unwrap();
        let xs = [0.6, -0.2];
        let mut h = [0.0f64; 2];
        for x in xs {
            for i in 0..2 {
                let c = u.at2(i, 0) * x + b.at(i);
                h[i] = (alpha * h[i] + (1.0 - alpha) * c).tanh();
            }
        }
        let mut s = CellState::zeros(CellKind::AbDrnn, 2);
        for x in xs {
            let xv = Tensor::vector(vec![x]).unwrap();
            s = abdrnn_step(&p, &s, &xv).unwrap();
        }
        assert!(vecs_close(s.h.data(), &h, 1e-12));
    }

    #[test]
    fn tanh_states_stay_inside_unit_box() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for kind in [CellKind::Drnn, CellKind::Sdrnn, CellKind::Srn] {
            let p = seeded(kind, 5, 3, rng.random());
            let mut s = CellState::zeros(kind, 5);
            for _ in 0..20 {
                let x =
                    Tensor::vector((0..3).map(|_| rng.random_range(-3.0..3.0)).collect()).unwrap();
                s = eager_step(kind, &p, &s, &x).unwrap();
                for v in s.h.data() {
                    assert!(v.abs() < 1.0, "{kind:?} escaped (-1,1): {v}");
                }
            }
        }
    }

    #[test]
    fn drnn_blend_keeps_magnitude_at_most_one_with_tanh() {
        // |h(t)| <= 1 by induction: the blend of |h| <= 1 with any tanh
        // output through alpha in (0,1) stays bounded, and tanh contracts.
        let p = seeded(CellKind::Drnn, 6, 2, 83);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut s = CellState::zeros(CellKind::Drnn, 6);
        for _ in 0..50 {
            let x = Tensor::vector((0..2).map(|_| rng.random_range(-5.0..5.0)).collect()).unwrap();
            s = drnn_step(&p, &s, &x).unwrap();
            for v in s.h.data() {
                assert!(v.abs() <= 1.0);
            }
        }
    }

    #[test]
    fn dale_signs_survive_random_weight_updates() {
        let mut p = seeded(CellKind::Drnn, 5, 2, 91);
        let signs = p.dale_signs.clone().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..1000 {
            {
                let w = p.w.as_mut().unwrap();
                for v in w.data_mut() {
                    *v += rng.random_range(-0.1..0.1);
                }
            }
            let eff = effective_recurrent_matrix(&p).unwrap();
            for i in 0..5 {
                for j in 0..5 {
                    let v = eff.at2(i, j);
                    if signs[j] > 0.0 {
                        assert!(v >= 0.0);
                    } else {
                        assert!(v <= 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn alpha_stays_inside_unit_interval_under_arbitrary_updates() {
        // Random walk at optimizer-step magnitudes, plus spot checks near
        // the edge of where f64 sigmoid still resolves away from 0 and 1.
        let mut p = seeded(CellKind::Drnn, 4, 2, 97);
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..1000 {
            let delta = rng.random_range(-0.25..0.25);
            let cur = p.alpha_logit.as_ref().unwrap().item();
            p.alpha_logit = Some(Tensor::scalar(cur + delta).unwrap());
            let a = p.alpha_value().unwrap();
            assert!(a > 0.0 && a < 1.0);
        }
        for logit in [-35.0, -10.0, 10.0, 35.0] {
            p.alpha_logit = Some(Tensor::scalar(logit).unwrap());
            let a = p.alpha_value().unwrap();
            assert!(a > 0.0 && a < 1.0, "saturated at logit {logit}: {a}");
        }
    }

    #[test]
    fn permuted_dale_placement_keeps_the_count() {
        let p = init_parameters_with(
            CellKind::Drnn,
            10,
            2,
            3,
            Activation::Tanh,
            AlphaMode::Sigmoid,
            DalePlacement::Permuted { seed: 9 },
        );
        let signs = p.dale_signs.unwrap();
        assert_eq!(signs.iter().filter(|&&s| s == -1.0).count(), 2);
    }
}
