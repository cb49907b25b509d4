//! Numerically stable scalar and row-wise kernels shared by the tape and by
//! tape-free inference.

use super::{ComputeError, NodeId, Tape, Tensor};

/// Logistic function evaluated on the branch that cannot overflow.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln()
}

fn softmax_into(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v - max).exp();
        z += *o;
    }
    out.iter_mut().for_each(|o| *o /= z);
}

/// Max-shifted softmax over each row.
pub fn softmax_rows(t: &Tensor) -> Result<Tensor, ComputeError> {
    if t.is_empty() || t.cols() == 0 {
        return Err(ComputeError::Empty("softmax input"));
    }
    let mut out = t.clone();
    for r in 0..t.rows() {
        softmax_into(t.row(r), out.row_mut(r));
    }
    Ok(out)
}

/// Softmax over the unmasked entries of each row; masked entries are 0.
pub fn masked_softmax_rows(t: &Tensor, mask: &[Vec<bool>]) -> Result<Tensor, ComputeError> {
    if t.is_empty() || mask.len() != t.rows() {
        return Err(ComputeError::Empty("masked softmax input"));
    }
    let mut out = Tensor::zeros(t.shape());
    for r in 0..t.rows() {
        let keep = &mask[r];
        if keep.len() != t.cols() || !keep.iter().any(|&k| k) {
            return Err(ComputeError::Empty("masked softmax row"));
        }
        let vals: Vec<f64> = t.row(r).iter().zip(keep).filter(|(_, &k)| k).map(|(&v, _)| v).collect();
        let mut probs = vec![0.0; vals.len()];
        softmax_into(&vals, &mut probs);
        let mut it = probs.into_iter();
        for (o, &k) in out.row_mut(r).iter_mut().zip(keep) {
            if k {
                *o = it.next().unwrap();
            }
        }
    }
    Ok(out)
}

/// Row-wise `log softmax`.
pub fn log_softmax_rows(t: &Tensor) -> Result<Tensor, ComputeError> {
    if t.is_empty() || t.cols() == 0 {
        return Err(ComputeError::Empty("log_softmax input"));
    }
    let mut out = t.clone();
    for r in 0..t.rows() {
        let lse = log_sum_exp(t.row(r));
        out.row_mut(r).iter_mut().for_each(|v| *v -= lse);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Nonlinearity {
    Tanh,
    Sigmoid,
    Relu,
}

impl Nonlinearity {
    pub fn eval(self, x: f64) -> f64 {
        match self {
            Nonlinearity::Tanh => x.tanh(),
            Nonlinearity::Sigmoid => sigmoid(x),
            Nonlinearity::Relu => x.max(0.0),
        }
    }

    pub fn apply(self, tape: &mut Tape<'_>, x: NodeId) -> NodeId {
        match self {
            Nonlinearity::Tanh => tape.tanh(x),
            Nonlinearity::Sigmoid => tape.sigmoid(x),
            Nonlinearity::Relu => tape.relu(x),
        }
    }
}
