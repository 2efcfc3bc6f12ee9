use super::{Graph, Var};
use crate::error::{Error, Result};

/// Result of [`Graph::scaled_dot_product_attention`].
#[derive(Debug, Clone, Copy)]
pub struct Attention {
    pub output: Var,
    /// Row-stochastic `B×Tq×Tk` weights.
    pub weights: Var,
}

impl Graph {
    /// `softmax(Q·Kᵀ / sqrt(d)) · V` for `Q: B×Tq×d`, `K: B×Tk×d`, `V: B×Tk×dv`.
    pub fn scaled_dot_product_attention(&mut self, q: Var, k: Var, v: Var) -> Result<Attention> {
        let (sq, sk, sv) = (
            self.shape(q).to_vec(),
            self.shape(k).to_vec(),
            self.shape(v).to_vec(),
        );
        if sq.len() != 3 || sk.len() != 3 || sv.len() != 3 || sq[2] != sk[2] || sk[1] != sv[1]
        {
            return Err(Error::shape(format!(
                "attention with Q {sq:?}, K {sk:?}, V {sv:?}"
            )));
        }
        let kt = self.transpose(k, 1, 2)?;
        let scores = self.matmul(q, kt)?;
        let scaled = self.scale(scores, 1.0 / (sq[2] as f64).sqrt());
        let weights = self.softmax(scaled, 2)?;
        let output = self.matmul(weights, v)?;
        Ok(Attention { output, weights })
    }
}
