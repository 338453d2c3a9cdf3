//! Parameterized building blocks. Each block only stores [`ParamId`]s; values
//! live in the model's [`ParamStore`] and are bound into a [`Graph`] on use.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::Result;
use crate::numerics::{AttentionSpec, Graph, ParamId, ParamStore, Tensor, Var};

pub(crate) fn normal(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

#[derive(Debug, Clone)]
pub(crate) struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    /// Weight `[d_in × d_out]` drawn with standard deviation `gain/√d_in`.
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, d_in: usize, d_out: usize, gain: f64) -> Self {
        let w = store.add(format!("{name}.weight"), normal(rng, &[d_in, d_out], gain / (d_in as f64).sqrt()));
        let b = store.add(format!("{name}.bias"), Tensor::zeros(&[d_out]));
        Self { w, b }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }

    pub fn ids(&self) -> [ParamId; 2] {
        [self.w, self.b]
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Norm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl Norm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        let gain = store.add(format!("{name}.gain"), Tensor::full(&[d], 1.0));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[d]));
        Self { gain, bias }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let gain = g.param(store, self.gain);
        let bias = g.param(store, self.bias);
        g.layer_norm(x, gain, bias)
    }
}

#[derive(Debug, Clone)]
pub(crate) struct MultiHead {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

impl MultiHead {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, d: usize) -> Self {
        Self {
            q: Linear::new(store, rng, &format!("{name}.q"), d, d, 1.0),
            k: Linear::new(store, rng, &format!("{name}.k"), d, d, 1.0),
            v: Linear::new(store, rng, &format!("{name}.v"), d, d, 1.0),
            o: Linear::new(store, rng, &format!("{name}.o"), d, d, 1.0),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, query: Var, memory: Var, spec: AttentionSpec) -> Result<Var> {
        let q = self.q.forward(g, store, query)?;
        let k = self.k.forward(g, store, memory)?;
        let v = self.v.forward(g, store, memory)?;
        let a = g.attention(q, k, v, spec)?;
        self.o.forward(g, store, a)
    }

    pub fn ids(&self) -> Vec<ParamId> {
        [&self.q, &self.k, &self.v, &self.o].iter().flat_map(|l| l.ids()).collect()
    }
}

#[derive(Debug, Clone)]
pub(crate) struct FeedForward {
    pub w1: Linear,
    pub w2: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, d: usize, ffn: usize) -> Self {
        Self {
            w1: Linear::new(store, rng, &format!("{name}.w1"), d, ffn, 1.0),
            w2: Linear::new(store, rng, &format!("{name}.w2"), ffn, d, 1.0),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.w1.forward(g, store, x)?;
        let h = g.gelu(h)?;
        self.w2.forward(g, store, h)
    }

    pub fn ids(&self) -> Vec<ParamId> {
        self.w1.ids().into_iter().chain(self.w2.ids()).collect()
    }
}

/// Pre-LN self-attention block: `x + Attn(LN(x))`, then `x + FFN(LN(x))`.
#[derive(Debug, Clone)]
pub(crate) struct EncoderLayer {
    pub ln1: Norm,
    pub attn: MultiHead,
    pub ln2: Norm,
    pub ffn: FeedForward,
}

impl EncoderLayer {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, d: usize, ffn: usize) -> Self {
        Self {
            ln1: Norm::new(store, &format!("{name}.ln1"), d),
            attn: MultiHead::new(store, rng, &format!("{name}.attn"), d),
            ln2: Norm::new(store, &format!("{name}.ln2"), d),
            ffn: FeedForward::new(store, rng, &format!("{name}.ffn"), d, ffn),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, spec: AttentionSpec) -> Result<Var> {
        let h = self.ln1.forward(g, store, x)?;
        let a = self.attn.forward(g, store, h, h, spec)?;
        let x = g.add(x, a)?;
        let h = self.ln2.forward(g, store, x)?;
        let f = self.ffn.forward(g, store, h)?;
        g.add(x, f)
    }

    /// Attention and feed-forward weights and biases (no LayerNorm).
    pub fn weight_ids(&self) -> Vec<ParamId> {
        self.attn.ids().into_iter().chain(self.ffn.ids()).collect()
    }
}

/// Pre-LN decoder block: causal self-attention, cross-attention, FFN.
#[derive(Debug, Clone)]
pub(crate) struct DecoderLayer {
    pub ln1: Norm,
    pub self_attn: MultiHead,
    pub ln2: Norm,
    pub cross_attn: MultiHead,
    pub ln3: Norm,
    pub ffn: FeedForward,
}

impl DecoderLayer {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, d: usize, ffn: usize) -> Self {
        Self {
            ln1: Norm::new(store, &format!("{name}.ln1"), d),
            self_attn: MultiHead::new(store, rng, &format!("{name}.self_attn"), d),
            ln2: Norm::new(store, &format!("{name}.ln2"), d),
            cross_attn: MultiHead::new(store, rng, &format!("{name}.cross_attn"), d),
            ln3: Norm::new(store, &format!("{name}.ln3"), d),
            ffn: FeedForward::new(store, rng, &format!("{name}.ffn"), d, ffn),
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        y: Var,
        memory: Var,
        self_spec: AttentionSpec,
        cross_spec: AttentionSpec,
    ) -> Result<Var> {
        let h = self.ln1.forward(g, store, y)?;
        let a = self.self_attn.forward(g, store, h, h, self_spec)?;
        let y = g.add(y, a)?;
        let h = self.ln2.forward(g, store, y)?;
        let c = self.cross_attn.forward(g, store, h, memory, cross_spec)?;
        let y = g.add(y, c)?;
        let h = self.ln3.forward(g, store, y)?;
        let f = self.ffn.forward(g, store, h)?;
        g.add(y, f)
    }
}

/// Fixed sinusoidal encodings: `sin(t/10000^(2i/d))` on even columns,
/// `cos` on odd ones.
pub fn sinusoidal_positions(len: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; len * d];
    for t in 0..len {
        for i in 0..d {
            let rate = 10000f64.powf(-((i / 2 * 2) as f64) / d as f64);
            let angle = t as f64 * rate;
            out[t * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    out
}
