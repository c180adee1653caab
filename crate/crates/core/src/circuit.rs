//! Gate-level circuit IR, benchmark circuit constructors, and the
//! basis-lowering transpiler.
//!
//! Conventions used across the crate:
//!
//! * Qubit 0 is the leftmost ket label; bit strings read qubit 0 first, so
//!   qubit 0 is the most significant bit of a basis-state index.
//! * Gate adjoints are carried by an `inverted` flag instead of resynthesized
//!   sequences, so folding can insert exact inverses.
//! * Circuits are immutable after construction; transforms return new
//!   circuits.

use std::f64::consts::{FRAC_PI_2, FRAC_PI_4};
use std::fmt;

use num_complex::Complex64;
use thiserror::Error;

use crate::linalg::{CMat, C_ONE, C_ZERO};

#[derive(Debug, Error, PartialEq)]
pub enum CircuitError {
    #[error("gate {kind} expects {expected} qubit(s), got {got}")]
    ArityMismatch {
        kind: String,
        expected: usize,
        got: usize,
    },
    #[error("duplicate qubit index {0} in gate operand list")]
    DuplicateQubit(usize),
    #[error("qubit index {index} out of range for width {width}")]
    QubitOutOfRange { index: usize, width: usize },
    #[error("no lowering rule for gate {0}")]
    UnknownGate(String),
    #[error("width {0} exceeds the {MAX_UNITARY_WIDTH}-qubit dense-unitary limit")]
    WidthOverflow(usize),
    #[error("state-preparation list must act on a single qubit")]
    MultiQubitPrep,
    #[error("parse error on line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

/// Widest circuit for which a dense 2^m x 2^m unitary is materialized.
pub const MAX_UNITARY_WIDTH: usize = 10;

/// Gate alphabet. `Rz` carries its rotation angle in radians.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GateKind {
    H,
    X,
    SqrtX,
    T,
    Rz(f64),
    Cx,
    Cswap,
}

impl GateKind {
    pub fn arity(&self) -> usize {
        match self {
            GateKind::H | GateKind::X | GateKind::SqrtX | GateKind::T | GateKind::Rz(_) => 1,
            GateKind::Cx => 2,
            GateKind::Cswap => 3,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            GateKind::H => "H",
            GateKind::X => "X",
            GateKind::SqrtX => "SQRTX",
            GateKind::T => "T",
            GateKind::Rz(_) => "RZ",
            GateKind::Cx => "CX",
            GateKind::Cswap => "CSWAP",
        }
    }

    fn is_self_inverse(&self) -> bool {
        matches!(self, GateKind::H | GateKind::X | GateKind::Cx | GateKind::Cswap)
    }
}

/// One gate application: a kind, its ordered operand qubits, and an
/// `inverted` flag meaning the adjoint is applied.
#[derive(Debug, Clone, PartialEq)]
pub struct GateOp {
    pub kind: GateKind,
    pub qubits: Vec<usize>,
    pub inverted: bool,
}

impl GateOp {
    pub fn new(kind: GateKind, qubits: Vec<usize>) -> Self {
        GateOp {
            kind,
            qubits,
            inverted: false,
        }
    }

    pub fn h(q: usize) -> Self {
        Self::new(GateKind::H, vec![q])
    }
    pub fn x(q: usize) -> Self {
        Self::new(GateKind::X, vec![q])
    }
    pub fn sqrt_x(q: usize) -> Self {
        Self::new(GateKind::SqrtX, vec![q])
    }
    pub fn t(q: usize) -> Self {
        Self::new(GateKind::T, vec![q])
    }
    pub fn t_dag(q: usize) -> Self {
        Self::new(GateKind::T, vec![q]).inverse()
    }
    pub fn rz(q: usize, angle: f64) -> Self {
        Self::new(GateKind::Rz(angle), vec![q])
    }
    pub fn cx(control: usize, target: usize) -> Self {
        Self::new(GateKind::Cx, vec![control, target])
    }
    pub fn cswap(control: usize, a: usize, b: usize) -> Self {
        Self::new(GateKind::Cswap, vec![control, a, b])
    }

    /// The op whose unitary is the conjugate transpose of this op's.
    ///
    /// Self-inverse kinds map to themselves, Rz negates its angle, and the
    /// remaining kinds (T, sqrt-X) toggle the `inverted` flag.
    pub fn inverse(&self) -> GateOp {
        if self.inverted {
            return GateOp::new(self.kind, self.qubits.clone());
        }
        match self.kind {
            k if k.is_self_inverse() => GateOp::new(k, self.qubits.clone()),
            GateKind::Rz(theta) => GateOp::new(GateKind::Rz(-theta), self.qubits.clone()),
            _ => GateOp {
                kind: self.kind,
                qubits: self.qubits.clone(),
                inverted: true,
            },
        }
    }

    fn validate(&self, width: usize) -> Result<(), CircuitError> {
        let expected = self.kind.arity();
        if self.qubits.len() != expected {
            return Err(CircuitError::ArityMismatch {
                kind: self.kind.name().to_string(),
                expected,
                got: self.qubits.len(),
            });
        }
        for (i, &q) in self.qubits.iter().enumerate() {
            if q >= width {
                return Err(CircuitError::QubitOutOfRange { index: q, width });
            }
            if self.qubits[..i].contains(&q) {
                return Err(CircuitError::DuplicateQubit(q));
            }
        }
        Ok(())
    }

    /// Dense matrix over this op's own qubits, first operand most significant.
    pub fn matrix(&self) -> CMat {
        let base = match self.kind {
            GateKind::H => {
                let s = Complex64::new(std::f64::consts::FRAC_1_SQRT_2, 0.0);
                CMat::from_row_slice(2, 2, &[s, s, s, -s])
            }
            GateKind::X => CMat::from_row_slice(2, 2, &[C_ZERO, C_ONE, C_ONE, C_ZERO]),
            GateKind::SqrtX => {
                let p = Complex64::new(0.5, 0.5);
                let m = Complex64::new(0.5, -0.5);
                CMat::from_row_slice(2, 2, &[p, m, m, p])
            }
            GateKind::T => CMat::from_diagonal(&nalgebra::DVector::from_vec(vec![
                C_ONE,
                Complex64::from_polar(1.0, FRAC_PI_4),
            ])),
            GateKind::Rz(theta) => CMat::from_diagonal(&nalgebra::DVector::from_vec(vec![
                Complex64::from_polar(1.0, -theta / 2.0),
                Complex64::from_polar(1.0, theta / 2.0),
            ])),
            GateKind::Cx => {
                let mut m = CMat::zeros(4, 4);
                m[(0, 0)] = C_ONE;
                m[(1, 1)] = C_ONE;
                m[(2, 3)] = C_ONE;
                m[(3, 2)] = C_ONE;
                m
            }
            GateKind::Cswap => {
                let mut m = CMat::identity(8, 8);
                // |101> <-> |110> in (control, a, b) bit order.
                m[(5, 5)] = C_ZERO;
                m[(6, 6)] = C_ZERO;
                m[(5, 6)] = C_ONE;
                m[(6, 5)] = C_ONE;
                m
            }
        };
        if self.inverted {
            base.adjoint()
        } else {
            base
        }
    }
}

impl fmt::Display for GateOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} ", self.kind.name())?;
        let qs: Vec<String> = self.qubits.iter().map(|q| q.to_string()).collect();
        write!(f, "{}", qs.join(","))?;
        if let GateKind::Rz(theta) = self.kind {
            write!(f, " {}", theta)?;
        }
        if self.inverted {
            write!(f, " dag")?;
        }
        Ok(())
    }
}

/// Ordered gate list over a fixed number of qubits.
#[derive(Debug, Clone, PartialEq)]
pub struct Circuit {
    width: usize,
    ops: Vec<GateOp>,
    label: String,
}

impl Circuit {
    pub fn new(width: usize, label: impl Into<String>) -> Self {
        Circuit {
            width,
            ops: Vec::new(),
            label: label.into(),
        }
    }

    pub fn with_ops(
        width: usize,
        label: impl Into<String>,
        ops: Vec<GateOp>,
    ) -> Result<Self, CircuitError> {
        let mut c = Circuit::new(width, label);
        for op in ops {
            c.push(op)?;
        }
        Ok(c)
    }

    pub fn push(&mut self, op: GateOp) -> Result<(), CircuitError> {
        op.validate(self.width)?;
        self.ops.push(op);
        Ok(())
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn ops(&self) -> &[GateOp] {
        &self.ops
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn count_kind(&self, name: &str) -> usize {
        self.ops.iter().filter(|op| op.kind.name() == name).count()
    }

    /// New circuit with the same width/label and the given ops.
    pub fn replaced_ops(&self, ops: Vec<GateOp>) -> Result<Circuit, CircuitError> {
        Circuit::with_ops(self.width, self.label.clone(), ops)
    }

    /// New circuit with `extra` appended.
    pub fn extended(&self, extra: &[GateOp]) -> Result<Circuit, CircuitError> {
        let mut ops = self.ops.clone();
        ops.extend_from_slice(extra);
        self.replaced_ops(ops)
    }

    /// Dense unitary of the whole circuit: the product of the gate matrices
    /// in op order.
    pub fn unitary(&self) -> Result<CMat, CircuitError> {
        if self.width > MAX_UNITARY_WIDTH {
            return Err(CircuitError::WidthOverflow(self.width));
        }
        let dim = 1usize << self.width;
        let mut u = CMat::identity(dim, dim);
        for op in &self.ops {
            apply_gate_left(&mut u, &op.matrix(), &op.qubits, self.width);
        }
        Ok(u)
    }

    /// One gate per line, `KIND q0[,q1[,q2]] [angle] [dag]`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for op in &self.ops {
            s.push_str(&op.to_string());
            s.push('\n');
        }
        s
    }

    /// Parse the line-oriented text format. The width is the smallest that
    /// fits every referenced qubit unless `width` is given.
    pub fn from_text(
        text: &str,
        width: Option<usize>,
        label: impl Into<String>,
    ) -> Result<Circuit, CircuitError> {
        let mut ops = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            ops.push(parse_gate_line(line, lineno + 1)?);
        }
        let needed = ops
            .iter()
            .flat_map(|op| op.qubits.iter().copied())
            .max()
            .map_or(0, |q| q + 1);
        let width = width.unwrap_or(needed).max(needed);
        Circuit::with_ops(width, label, ops)
    }
}

fn parse_gate_line(line: &str, lineno: usize) -> Result<GateOp, CircuitError> {
    let err = |msg: &str| CircuitError::Parse {
        line: lineno,
        msg: msg.to_string(),
    };
    let mut parts = line.split_whitespace();
    let name = parts.next().ok_or_else(|| err("empty gate line"))?;
    let qubits: Vec<usize> = parts
        .next()
        .ok_or_else(|| err("missing qubit list"))?
        .split(',')
        .map(|t| t.parse::<usize>().map_err(|_| err("bad qubit index")))
        .collect::<Result<_, _>>()?;
    let rest: Vec<&str> = parts.collect();
    let mut inverted = false;
    let mut angle: Option<f64> = None;
    for tok in rest {
        if tok == "dag" {
            inverted = true;
        } else {
            angle = Some(tok.parse::<f64>().map_err(|_| err("bad angle"))?);
        }
    }
    let kind = match name {
        "H" => GateKind::H,
        "X" => GateKind::X,
        "SQRTX" => GateKind::SqrtX,
        "T" => GateKind::T,
        "RZ" => GateKind::Rz(angle.ok_or_else(|| err("RZ requires an angle"))?),
        "CX" => GateKind::Cx,
        "CSWAP" => GateKind::Cswap,
        other => return Err(err(&format!("unknown gate `{other}`"))),
    };
    if !matches!(kind, GateKind::Rz(_)) && angle.is_some() {
        return Err(err("angle given for a non-RZ gate"));
    }
    Ok(GateOp {
        kind,
        qubits,
        inverted,
    })
}

/// Set of gate kinds a device implements natively.
#[derive(Debug, Clone, PartialEq)]
pub struct BasisSet {
    names: Vec<&'static str>,
}

impl BasisSet {
    /// The device basis: {Rz, sqrt-X, X, CX}.
    pub fn device_default() -> Self {
        BasisSet {
            names: vec!["RZ", "SQRTX", "X", "CX"],
        }
    }

    pub fn from_names(names: Vec<&'static str>) -> Self {
        BasisSet { names }
    }

    pub fn contains(&self, kind: &GateKind) -> bool {
        self.names.contains(&kind.name())
    }

    pub fn names(&self) -> &[&'static str] {
        &self.names
    }
}

/// Three-qubit quantum-routing circuit: signal on qubit 0 (path 1), null
/// qubit 1 (path 2), control on qubit 2; the controlled-swap routes the
/// signal into a superposition of the two paths.
pub fn build_routing_circuit() -> Circuit {
    Circuit::with_ops(
        3,
        "routing",
        vec![
            GateOp::h(0),
            GateOp::t(0),
            GateOp::h(2),
            GateOp::cswap(2, 0, 1),
        ],
    )
    .expect("routing circuit is well formed")
}

/// Six-qubit bucket-brigade QRAM circuit.
///
/// Wires: 0 address, 1-2 tree, 3-4 memory cells, 5 output. The cell
/// contents are copied onto the tree leaves, the address-controlled swap
/// routes the selected leaf to the root port, the root port is copied to
/// the output, and a second controlled swap restores the tree.
///
/// `d0_prep` is the state-preparation gate list for memory cell D0; every
/// op must act on one and the same qubit. Cell D1 holds |1>.
pub fn build_qram_circuit(d0_prep: &[GateOp]) -> Result<Circuit, CircuitError> {
    let mut prep_qubit: Option<usize> = None;
    for op in d0_prep {
        if op.kind.arity() != 1 || op.qubits.len() != 1 {
            return Err(CircuitError::MultiQubitPrep);
        }
        match prep_qubit {
            None => prep_qubit = Some(op.qubits[0]),
            Some(q) if q == op.qubits[0] => {}
            Some(_) => return Err(CircuitError::MultiQubitPrep),
        }
    }
    let mut ops = vec![GateOp::h(0)];
    for op in d0_prep {
        ops.push(GateOp {
            kind: op.kind,
            qubits: vec![3],
            inverted: op.inverted,
        });
    }
    ops.extend([
        GateOp::x(4),
        GateOp::cx(3, 1),
        GateOp::cx(4, 2),
        GateOp::cswap(0, 1, 2),
        GateOp::cx(1, 5),
        GateOp::cswap(0, 1, 2),
    ]);
    Circuit::with_ops(6, "qram", ops)
}

/// Lower every gate to the target basis. The output's unitary equals the
/// input's up to global phase.
pub fn transpile(c: &Circuit, basis: &BasisSet) -> Result<Circuit, CircuitError> {
    let mut ops = Vec::with_capacity(c.len());
    for op in c.ops() {
        lower_into(op, basis, &mut ops, 0)?;
    }
    c.replaced_ops(ops)
}

fn lower_into(
    op: &GateOp,
    basis: &BasisSet,
    out: &mut Vec<GateOp>,
    depth: usize,
) -> Result<(), CircuitError> {
    if depth > 8 {
        return Err(CircuitError::UnknownGate(op.kind.name().to_string()));
    }
    if basis.contains(&op.kind) {
        out.push(op.clone());
        return Ok(());
    }
    let seq = lowering_rule(op)?;
    for sub in &seq {
        lower_into(sub, basis, out, depth + 1)?;
    }
    Ok(())
}

/// Lowering rules: H -> Rz(pi/2) sqrt-X Rz(pi/2), T -> Rz(pi/4),
/// CSWAP -> CX-sandwiched Toffoli, Toffoli -> the standard 6-CX network.
fn lowering_rule(op: &GateOp) -> Result<Vec<GateOp>, CircuitError> {
    if op.inverted {
        let base = GateOp::new(op.kind, op.qubits.clone());
        let seq = lowering_rule(&base)?;
        return Ok(seq.iter().rev().map(|g| g.inverse()).collect());
    }
    let q = &op.qubits;
    match op.kind {
        GateKind::H => Ok(vec![
            GateOp::rz(q[0], FRAC_PI_2),
            GateOp::sqrt_x(q[0]),
            GateOp::rz(q[0], FRAC_PI_2),
        ]),
        GateKind::T => Ok(vec![GateOp::rz(q[0], FRAC_PI_4)]),
        GateKind::Cswap => {
            let (c, a, b) = (q[0], q[1], q[2]);
            let mut seq = vec![GateOp::cx(b, a)];
            seq.extend(toffoli_ops(c, a, b));
            seq.push(GateOp::cx(b, a));
            Ok(seq)
        }
        _ => Err(CircuitError::UnknownGate(op.kind.name().to_string())),
    }
}

/// Standard Toffoli network with controls `c1`, `c2` and target `t`:
/// six CX gates plus T/T-dagger phases and two Hadamards.
fn toffoli_ops(c1: usize, c2: usize, t: usize) -> Vec<GateOp> {
    vec![
        GateOp::h(t),
        GateOp::cx(c2, t),
        GateOp::t_dag(t),
        GateOp::cx(c1, t),
        GateOp::t(t),
        GateOp::cx(c2, t),
        GateOp::t_dag(t),
        GateOp::cx(c1, t),
        GateOp::t(c2),
        GateOp::t(t),
        GateOp::h(t),
        GateOp::cx(c1, c2),
        GateOp::t(c1),
        GateOp::t_dag(c2),
        GateOp::cx(c1, c2),
    ]
}

/// Bit value of qubit `q` in basis-state index `i` (qubit 0 is the MSB).
#[inline]
pub fn qubit_bit(i: usize, q: usize, width: usize) -> usize {
    (i >> (width - 1 - q)) & 1
}

/// mat <- embed(u) * mat, where `u` acts on `qubits` of a `width`-qubit
/// register and `mat` is any 2^width x 2^width matrix.
pub(crate) fn apply_gate_left(mat: &mut CMat, u: &CMat, qubits: &[usize], width: usize) {
    let dim = 1usize << width;
    let k = qubits.len();
    let sub = 1usize << k;
    debug_assert_eq!(u.nrows(), sub);
    let masks: Vec<usize> = qubits.iter().map(|&q| 1usize << (width - 1 - q)).collect();
    let all_mask: usize = masks.iter().sum();
    let mut idx = vec![0usize; sub];
    let mut tmp = vec![C_ZERO; sub];
    for base in 0..dim {
        if base & all_mask != 0 {
            continue;
        }
        for (l, slot) in idx.iter_mut().enumerate() {
            let mut v = base;
            for (j, &mask) in masks.iter().enumerate() {
                if (l >> (k - 1 - j)) & 1 == 1 {
                    v |= mask;
                }
            }
            *slot = v;
        }
        for col in 0..dim {
            for (l, t) in tmp.iter_mut().enumerate() {
                let mut acc = C_ZERO;
                for (lp, &src) in idx.iter().enumerate() {
                    acc += u[(l, lp)] * mat[(src, col)];
                }
                *t = acc;
            }
            for (l, &dst) in idx.iter().enumerate() {
                mat[(dst, col)] = tmp[l];
            }
        }
    }
}

/// mat <- mat * embed(u)^dagger, the column-side companion of
/// [`apply_gate_left`]; together they conjugate a density matrix.
pub(crate) fn apply_gate_right_adjoint(mat: &mut CMat, u: &CMat, qubits: &[usize], width: usize) {
    let dim = 1usize << width;
    let k = qubits.len();
    let sub = 1usize << k;
    debug_assert_eq!(u.nrows(), sub);
    let masks: Vec<usize> = qubits.iter().map(|&q| 1usize << (width - 1 - q)).collect();
    let all_mask: usize = masks.iter().sum();
    let mut idx = vec![0usize; sub];
    let mut tmp = vec![C_ZERO; sub];
    for base in 0..dim {
        if base & all_mask != 0 {
            continue;
        }
        for (l, slot) in idx.iter_mut().enumerate() {
            let mut v = base;
            for (j, &mask) in masks.iter().enumerate() {
                if (l >> (k - 1 - j)) & 1 == 1 {
                    v |= mask;
                }
            }
            *slot = v;
        }
        for row in 0..dim {
            for (l, t) in tmp.iter_mut().enumerate() {
                let mut acc = C_ZERO;
                for (lp, &src) in idx.iter().enumerate() {
                    acc += mat[(row, src)] * u[(l, lp)].conj();
                }
                *t = acc;
            }
            for (l, &dst) in idx.iter().enumerate() {
                mat[(row, dst)] = tmp[l];
            }
        }
    }
}
