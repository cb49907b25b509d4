use super::{ComputeError, NodeId, ParameterStore, Tape, Tensor};

/// Parameter names of one LSTM layer: a fused `4n × (in + n)` weight over
/// `[x; h_prev]` and a `4n` bias, gate order input, forget, output, candidate.
#[derive(Clone, Debug)]
pub struct LstmParams {
    pub weight: String,
    pub bias: String,
    pub input_dim: usize,
    pub hidden: usize,
    /// Constant added to the forget-gate pre-activation.
    pub forget_bias: f64,
}

impl LstmParams {
    pub fn new(prefix: &str, input_dim: usize, hidden: usize, forget_bias: f64) -> Self {
        LstmParams {
            weight: format!("{prefix}.w"),
            bias: format!("{prefix}.b"),
            input_dim,
            hidden,
            forget_bias,
        }
    }

    pub fn register(&self, store: &mut ParameterStore) -> Result<(), ComputeError> {
        let n = self.hidden;
        store.insert(&self.weight, Tensor::zeros(&[4 * n, self.input_dim + n]))?;
        store.insert(&self.bias, Tensor::zeros(&[4 * n]))?;
        Ok(())
    }
}

/// One LSTM step over a batch of rows:
/// `c = f ⊙ c_prev + i ⊙ g`, `h = o ⊙ tanh(c)`.
pub fn lstm_cell(
    tape: &mut Tape<'_>,
    x: NodeId,
    h_prev: NodeId,
    c_prev: NodeId,
    params: &LstmParams,
) -> Result<(NodeId, NodeId), ComputeError> {
    let n = params.hidden;
    let w = tape.param(&params.weight)?;
    let b = tape.param(&params.bias)?;
    let xh = tape.concat_cols(&[x, h_prev])?;
    let pre = tape.affine(xh, w, b)?;
    let i = tape.slice_cols(pre, 0, n)?;
    let f = tape.slice_cols(pre, n, n)?;
    let o = tape.slice_cols(pre, 2 * n, n)?;
    let g = tape.slice_cols(pre, 3 * n, n)?;
    let i = tape.sigmoid(i);
    let f = if params.forget_bias != 0.0 {
        let rows = tape.value(f).rows();
        let off = tape.constant(Tensor::filled(&[rows, n], params.forget_bias));
        tape.add(f, off)?
    } else {
        f
    };
    let f = tape.sigmoid(f);
    let o = tape.sigmoid(o);
    let g = tape.tanh(g);
    let keep = tape.mul(f, c_prev)?;
    let write = tape.mul(i, g)?;
    let c = tape.add(keep, write)?;
    let tc = tape.tanh(c);
    let h = tape.mul(o, tc)?;
    Ok((h, c))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_everything_gives_zero_state() {
        let p = LstmParams::new("l", 3, 2, 0.0);
        let mut store = ParameterStore::new();
        p.register(&mut store).unwrap();
        let mut tape = Tape::new(&store);
        let x = tape.constant(Tensor::zeros(&[1, 3]));
        let h0 = tape.constant(Tensor::zeros(&[1, 2]));
        let c0 = tape.constant(Tensor::zeros(&[1, 2]));
        let (h, c) = lstm_cell(&mut tape, x, h0, c0, &p).unwrap();
        assert_eq!(tape.value(h).data(), &[0.0, 0.0]);
        assert_eq!(tape.value(c).data(), &[0.0, 0.0]);
    }

    #[test]
    fn saturated_forget_gate_writes_only_input() {
        let n = 2;
        let p = LstmParams::new("l", 1, n, 0.0);
        let mut store = ParameterStore::new();
        p.register(&mut store).unwrap();
        let wid = store.id(&p.weight).unwrap();
        for (k, v) in store.value_mut(wid).data_mut().iter_mut().enumerate() {
            *v = 0.1 * (k as f64 % 5.0) - 0.2;
        }
        let bid = store.id(&p.bias).unwrap();
        for v in &mut store.value_mut(bid).data_mut()[n..2 * n] {
            *v = -1e9;
        }
        let mut tape = Tape::new(&store);
        let x = tape.constant(Tensor::vector(vec![0.7]));
        let h0 = tape.constant(Tensor::vector(vec![0.3, -0.4]));
        let c0 = tape.constant(Tensor::vector(vec![5.0, -5.0]));
        let (_, c) = lstm_cell(&mut tape, x, h0, c0, &p).unwrap();
        // recompute i ⊙ g directly from the parameters
        let w = store.value(wid);
        let input = [0.7, 0.3, -0.4];
        let pre = |row: usize| -> f64 { (0..3).map(|j| w.get(row, j) * input[j]).sum() };
        for u in 0..n {
            let i = super::super::ops::sigmoid(pre(u));
            let g = pre(3 * n + u).tanh();
            assert!((tape.value(c).data()[u] - i * g).abs() < 1e-15);
        }
    }
}
