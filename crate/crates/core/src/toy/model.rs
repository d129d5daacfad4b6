//! A two-matrix analytic language model with an optional scalar value head.
//!
//! `e = E[x]`, `h = tanh(e)`, `logits = h·W`, `values = h·u`. Gradients are
//! exact; everything is computed in f64.

use ndarray::{Array1, Array2, Array3, ArrayView2, ArrayView3, Axis};

pub const VOCAB: usize = 11;
pub const DIM: usize = 4;
pub const SEQ: usize = 6;

pub const EMBED: &str = "embed.weight";
pub const LM_HEAD: &str = "lm_head.weight";
pub const V_HEAD: &str = "v_head.weight";

/// 64-bit linear congruential generator.
#[derive(Clone, Debug)]
pub struct Lcg(u64);

impl Lcg {
    pub fn new(seed: u64) -> Self {
        let mut g = Self(seed);
        g.next_u64();
        g
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0 = self.0.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        self.0
    }

    /// Uniform in [0, 1).
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 / (1u64 << 53) as f64
    }

    /// Uniform in [lo, hi), rounded onto f32 so exported values are exact.
    pub fn uniform_f32(&mut self, lo: f64, hi: f64) -> f64 {
        (lo + (hi - lo) * self.uniform()) as f32 as f64
    }

    pub fn below(&mut self, n: u64) -> u64 {
        (self.uniform() * n as f64) as u64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyModel {
    pub embed: Array2<f64>,
    pub lm_head: Array2<f64>,
    pub v_head: Option<Array1<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Activations {
    pub emb: Array3<f64>,
    pub hidden: Array3<f64>,
    pub logits: Array3<f64>,
    pub values: Option<Array2<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Grads {
    pub embed: Array2<f64>,
    pub lm_head: Array2<f64>,
    pub v_head: Option<Array1<f64>>,
}

impl Grads {
    pub fn named(&self) -> Vec<(&'static str, Vec<usize>, Vec<f64>)> {
        let mut out = vec![
            (EMBED, vec![VOCAB, DIM], self.embed.iter().copied().collect()),
            (LM_HEAD, vec![DIM, VOCAB], self.lm_head.iter().copied().collect()),
        ];
        if let Some(u) = &self.v_head {
            out.push((V_HEAD, vec![DIM], u.to_vec()));
        }
        out
    }

    pub fn global_norm(&self) -> f64 {
        let named = self.named();
        crate::kernels::global_grad_norm(named.iter().map(|(_, _, d)| d.as_slice()))
    }

    pub fn scaled(&self, k: f64) -> Self {
        Self {
            embed: &self.embed * k,
            lm_head: &self.lm_head * k,
            v_head: self.v_head.as_ref().map(|u| u * k),
        }
    }
}

impl ToyModel {
    pub fn init(seed: u64, value_head: bool) -> Self {
        let mut g = Lcg::new(seed);
        let embed = Array2::from_shape_simple_fn((VOCAB, DIM), || g.uniform_f32(-1.0, 1.0));
        let lm_head = Array2::from_shape_simple_fn((DIM, VOCAB), || g.uniform_f32(-1.5, 1.5));
        let v_head = value_head.then(|| Array1::from_shape_simple_fn(DIM, || g.uniform_f32(-0.5, 0.5)));
        Self { embed, lm_head, v_head }
    }

    pub fn forward(&self, ids: ArrayView2<i64>) -> Activations {
        let (b, t) = ids.dim();
        let emb = Array3::from_shape_fn((b, t, DIM), |(i, j, d)| self.embed[[ids[[i, j]] as usize, d]]);
        let hidden = emb.mapv(f64::tanh);
        let flat = hidden.view().into_shape_with_order((b * t, DIM)).expect("contiguous");
        let logits = flat.dot(&self.lm_head).into_shape_with_order((b, t, VOCAB)).expect("shape");
        let values = self
            .v_head
            .as_ref()
            .map(|u| flat.dot(u).into_shape_with_order((b, t)).expect("shape"));
        Activations { emb, hidden, logits, values }
    }

    pub fn backward(
        &self,
        ids: ArrayView2<i64>,
        act: &Activations,
        dlogits: ArrayView3<f64>,
        dvalues: Option<ArrayView2<f64>>,
    ) -> Grads {
        let (b, t) = ids.dim();
        let h = act.hidden.view().into_shape_with_order((b * t, DIM)).expect("contiguous");
        let dz = dlogits.into_shape_with_order((b * t, VOCAB)).expect("contiguous");
        let lm_head = h.t().dot(&dz);
        let mut dh = dz.dot(&self.lm_head.t());
        let v_head = match (&self.v_head, dvalues) {
            (Some(u), Some(dv)) => {
                let dv = dv.into_shape_with_order(b * t).expect("contiguous");
                for (mut row, g) in dh.axis_iter_mut(Axis(0)).zip(dv.iter()) {
                    row.scaled_add(*g, u);
                }
                Some(h.t().dot(&dv))
            }
            (Some(_), None) => Some(Array1::zeros(DIM)),
            (None, _) => None,
        };
        let mut embed = Array2::zeros((VOCAB, DIM));
        for (k, (row, hrow)) in dh.axis_iter(Axis(0)).zip(h.axis_iter(Axis(0))).enumerate() {
            let tok = ids[[k / t, k % t]] as usize;
            for d in 0..DIM {
                embed[[tok, d]] += row[d] * (1.0 - hrow[d] * hrow[d]);
            }
        }
        Grads { embed, lm_head, v_head }
    }

    pub fn sgd(&mut self, grads: &Grads, lr: f64) {
        self.embed.scaled_add(-lr, &grads.embed);
        self.lm_head.scaled_add(-lr, &grads.lm_head);
        if let (Some(u), Some(g)) = (self.v_head.as_mut(), grads.v_head.as_ref()) {
            u.scaled_add(-lr, g);
        }
    }

    /// `(name, shape, data)` for every parameter, in export order.
    pub fn params(&self) -> Vec<(&'static str, Vec<usize>, Vec<f64>)> {
        Grads { embed: self.embed.clone(), lm_head: self.lm_head.clone(), v_head: self.v_head.clone() }.named()
    }

    /// Mutable flat access to one scalar parameter, for finite differences.
    pub fn param_mut(&mut self, name: &str, index: usize) -> &mut f64 {
        match name {
            EMBED => &mut self.embed.as_slice_mut().expect("contiguous")[index],
            LM_HEAD => &mut self.lm_head.as_slice_mut().expect("contiguous")[index],
            V_HEAD => &mut self.v_head.as_mut().expect("value head").as_slice_mut().expect("contiguous")[index],
            other => panic!("unknown parameter {other}"),
        }
    }
}
