//! Scalar reverse-mode differentiation.
//!
//! Every operation appends one node to a [`Tape`]. A node records its kind,
//! the indices of the nodes it reads, and the local partial derivative with
//! respect to each of those parents, evaluated at record time. Because a
//! node can only read nodes that already exist, the tape is in topological
//! order by construction and the backward pass is a single reverse sweep.
//!
//! `min`, `max` and `clip` take the subgradient of the active branch. At an
//! exact tie the left argument (or the unclipped input for `clip`) wins.

use std::fmt;

use super::NumError;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(u32);

impl Var {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    Input,
    Const,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Scale,
    AddConst,
    Exp,
    Log,
    Tanh,
    Min,
    Max,
    Clip,
    Sum,
    Dot,
    LinComb,
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            OpKind::Input => "input",
            OpKind::Const => "const",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Div => "div",
            OpKind::Neg => "neg",
            OpKind::Scale => "scale",
            OpKind::AddConst => "add_const",
            OpKind::Exp => "exp",
            OpKind::Log => "log",
            OpKind::Tanh => "tanh",
            OpKind::Min => "min",
            OpKind::Max => "max",
            OpKind::Clip => "clip",
            OpKind::Sum => "sum",
            OpKind::Dot => "dot",
            OpKind::LinComb => "lincomb",
        };
        f.write_str(name)
    }
}

/// Append-only computation record.
#[derive(Debug, Default, Clone)]
pub struct Tape {
    kinds: Vec<OpKind>,
    values: Vec<f64>,
    // Node i reads args[arg_start[i]..arg_start[i + 1]].
    arg_start: Vec<u32>,
    args: Vec<u32>,
    partials: Vec<f64>,
}

impl Tape {
    pub fn new() -> Self {
        let mut tape = Self::default();
        tape.arg_start.push(0);
        tape
    }

    pub fn with_capacity(nodes: usize) -> Self {
        let mut tape = Self {
            kinds: Vec::with_capacity(nodes),
            values: Vec::with_capacity(nodes),
            arg_start: Vec::with_capacity(nodes + 1),
            args: Vec::with_capacity(nodes * 2),
            partials: Vec::with_capacity(nodes * 2),
        };
        tape.arg_start.push(0);
        tape
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, v: Var) -> f64 {
        self.values[v.index()]
    }

    pub fn values_of(&self, vs: &[Var]) -> Vec<f64> {
        vs.iter().map(|&v| self.value(v)).collect()
    }

    pub fn kind(&self, v: Var) -> OpKind {
        self.kinds[v.index()]
    }

    fn push(&mut self, kind: OpKind, value: f64, parents: &[(Var, f64)]) -> Var {
        let idx = self.values.len();
        assert!(idx < u32::MAX as usize, "tape exceeded u32 node capacity");
        self.kinds.push(kind);
        self.values.push(value);
        for &(p, d) in parents {
            self.args.push(p.0);
            self.partials.push(d);
        }
        self.arg_start.push(self.args.len() as u32);
        Var(idx as u32)
    }

    /// Differentiable leaf.
    pub fn var(&mut self, value: f64) -> Var {
        self.push(OpKind::Input, value, &[])
    }

    pub fn vars(&mut self, values: &[f64]) -> Vec<Var> {
        values.iter().map(|&x| self.var(x)).collect()
    }

    pub fn constant(&mut self, value: f64) -> Var {
        self.push(OpKind::Const, value, &[])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(OpKind::Add, v, &[(a, 1.0), (b, 1.0)])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        self.push(OpKind::Sub, v, &[(a, 1.0), (b, -1.0)])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        self.push(OpKind::Mul, x * y, &[(a, y), (b, x)])
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        self.push(OpKind::Div, x / y, &[(a, 1.0 / y), (b, -x / (y * y))])
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let v = -self.value(a);
        self.push(OpKind::Neg, v, &[(a, -1.0)])
    }

    /// `c * a` for a constant `c`.
    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = c * self.value(a);
        self.push(OpKind::Scale, v, &[(a, c)])
    }

    /// `a + c` for a constant `c`.
    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) + c;
        self.push(OpKind::AddConst, v, &[(a, 1.0)])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).exp();
        self.push(OpKind::Exp, v, &[(a, v)])
    }

    pub fn log(&mut self, a: Var) -> Var {
        let x = self.value(a);
        self.push(OpKind::Log, x.ln(), &[(a, 1.0 / x)])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).tanh();
        self.push(OpKind::Tanh, v, &[(a, 1.0 - v * v)])
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.mul(a, a)
    }

    pub fn min(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        if x <= y {
            self.push(OpKind::Min, x, &[(a, 1.0), (b, 0.0)])
        } else {
            self.push(OpKind::Min, y, &[(a, 0.0), (b, 1.0)])
        }
    }

    pub fn max(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        if x >= y {
            self.push(OpKind::Max, x, &[(a, 1.0), (b, 0.0)])
        } else {
            self.push(OpKind::Max, y, &[(a, 0.0), (b, 1.0)])
        }
    }

    /// Clamp into `[lo, hi]`; the gradient is zero outside the band.
    pub fn clip(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let x = self.value(a);
        if x < lo {
            self.push(OpKind::Clip, lo, &[(a, 0.0)])
        } else if x > hi {
            self.push(OpKind::Clip, hi, &[(a, 0.0)])
        } else {
            self.push(OpKind::Clip, x, &[(a, 1.0)])
        }
    }

    pub fn sum(&mut self, xs: &[Var]) -> Var {
        let v = xs.iter().map(|&x| self.value(x)).sum();
        let parents: Vec<(Var, f64)> = xs.iter().map(|&x| (x, 1.0)).collect();
        self.push(OpKind::Sum, v, &parents)
    }

    pub fn dot(&mut self, a: &[Var], b: &[Var]) -> Var {
        assert_eq!(a.len(), b.len(), "dot operands differ in length");
        let mut v = 0.0;
        let mut parents = Vec::with_capacity(a.len() * 2);
        for (&x, &y) in a.iter().zip(b) {
            let (xv, yv) = (self.value(x), self.value(y));
            v += xv * yv;
            parents.push((x, yv));
            parents.push((y, xv));
        }
        self.push(OpKind::Dot, v, &parents)
    }

    /// `Σ coeffs[i] * xs[i]` with constant coefficients.
    pub fn lincomb(&mut self, xs: &[Var], coeffs: &[f64]) -> Var {
        assert_eq!(xs.len(), coeffs.len(), "lincomb operands differ in length");
        let mut v = 0.0;
        let mut parents = Vec::with_capacity(xs.len());
        for (&x, &c) in xs.iter().zip(coeffs) {
            v += c * self.value(x);
            parents.push((x, c));
        }
        self.push(OpKind::LinComb, v, &parents)
    }

    /// Log-softmax with max subtraction. The max is taken as a constant;
    /// the result's gradient does not depend on it.
    pub fn log_softmax(&mut self, logits: &[Var]) -> Vec<Var> {
        assert!(!logits.is_empty(), "log_softmax of empty logits");
        let m = logits
            .iter()
            .map(|&l| self.value(l))
            .fold(f64::NEG_INFINITY, f64::max);
        let shifted: Vec<Var> = logits.iter().map(|&l| self.add_const(l, -m)).collect();
        let exps: Vec<Var> = shifted.iter().map(|&s| self.exp(s)).collect();
        let total = self.sum(&exps);
        let lse = self.log(total);
        shifted.iter().map(|&s| self.sub(s, lse)).collect()
    }

    /// Adjoints of every node with respect to `output`.
    ///
    /// Fails on the first non-finite value recorded at or before `output`.
    pub fn backward(&self, output: Var) -> Result<Vec<f64>, NumError> {
        self.check_finite(output)?;
        let n = output.index() + 1;
        let mut adj = vec![0.0; n];
        adj[output.index()] = 1.0;
        for i in (0..n).rev() {
            let a = adj[i];
            if a == 0.0 {
                continue;
            }
            let (lo, hi) = (self.arg_start[i] as usize, self.arg_start[i + 1] as usize);
            for k in lo..hi {
                adj[self.args[k] as usize] += a * self.partials[k];
            }
        }
        Ok(adj)
    }

    pub fn check_finite(&self, upto: Var) -> Result<(), NumError> {
        for i in 0..=upto.index() {
            if !self.values[i].is_finite() {
                return Err(NumError::NonFinite {
                    node: i,
                    op: self.kinds[i].to_string(),
                    value: self.values[i],
                });
            }
        }
        Ok(())
    }

    /// Gradient of `output` with respect to the given leaves.
    pub fn gradient(&self, output: Var, wrt: &[Var]) -> Result<Vec<f64>, NumError> {
        let adj = self.backward(output)?;
        Ok(wrt
            .iter()
            .map(|v| adj.get(v.index()).copied().unwrap_or(0.0))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_gradient() {
        let mut t = Tape::new();
        let x = t.var(3.0);
        let y = t.mul(x, x);
        assert_eq!(t.value(y), 9.0);
        assert_eq!(t.gradient(y, &[x]).unwrap(), vec![6.0]);
    }

    #[test]
    fn parents_precede_children() {
        let mut t = Tape::new();
        let x = t.var(0.5);
        let y = t.var(-1.5);
        let s = t.mul(x, y);
        let e = t.exp(s);
        let z = t.sum(&[e, x, y]);
        for i in 0..t.len() {
            let (lo, hi) = (t.arg_start[i] as usize, t.arg_start[i + 1] as usize);
            for k in lo..hi {
                assert!((t.args[k] as usize) < i);
            }
        }
        assert!(z.index() == t.len() - 1);
    }

    #[test]
    fn min_tie_takes_left_branch() {
        let mut t = Tape::new();
        let a = t.var(2.0);
        let b = t.var(2.0);
        let m = t.min(a, b);
        assert_eq!(t.gradient(m, &[a, b]).unwrap(), vec![1.0, 0.0]);
        let mx = t.max(a, b);
        assert_eq!(t.gradient(mx, &[a, b]).unwrap(), vec![1.0, 0.0]);
    }

    #[test]
    fn clip_is_flat_outside_band() {
        let mut t = Tape::new();
        let x = t.var(1.5);
        let c = t.clip(x, 0.8, 1.2);
        assert_eq!(t.value(c), 1.2);
        assert_eq!(t.gradient(c, &[x]).unwrap(), vec![0.0]);
        let y = t.var(1.0);
        let c = t.clip(y, 0.8, 1.2);
        assert_eq!(t.gradient(c, &[y]).unwrap(), vec![1.0]);
    }

    #[test]
    fn non_finite_is_reported_with_node() {
        let mut t = Tape::new();
        let x = t.var(-1.0);
        let l = t.log(x);
        let y = t.scale(l, 2.0);
        match t.backward(y) {
            Err(NumError::NonFinite { node, op, .. }) => {
                assert_eq!(node, l.index());
                assert_eq!(op, "log");
            }
            other => panic!("expected non-finite error, got {other:?}"),
        }
    }

    #[test]
    fn log_softmax_matches_direct_formula() {
        let mut t = Tape::new();
        let xs = t.vars(&[0.3, -1.2, 2.0]);
        let ls = t.log_softmax(&xs);
        let z: f64 = [0.3f64, -1.2, 2.0].iter().map(|v| v.exp()).sum();
        for (i, v) in [0.3f64, -1.2, 2.0].iter().enumerate() {
            assert!((t.value(ls[i]) - (v - z.ln())).abs() < 1e-14);
        }
    }
}
