//! Small fully connected networks with explicit backpropagation and Adam.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// Shape `(inputs, outputs)`.
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

/// Tanh hidden layers, linear output.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

/// Activations kept from the forward pass; `acts[0]` is the input.
pub struct Cache {
    acts: Vec<Array2<f64>>,
}

pub type Grads = Vec<(Array2<f64>, Array1<f64>)>;

impl Mlp {
    /// Glorot-uniform weights, zero biases; the output layer is scaled by `out_scale`.
    pub fn new<R: Rng + ?Sized>(sizes: &[usize], out_scale: f64, rng: &mut R) -> Self {
        assert!(sizes.len() >= 2, "need input and output sizes");
        let last = sizes.len() - 2;
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(l, io)| {
                let bound = (6.0 / (io[0] + io[1]) as f64).sqrt();
                let scale = if l == last { out_scale } else { 1.0 };
                Dense {
                    w: Array2::from_shape_simple_fn((io[0], io[1]), || {
                        scale * rng.random_range(-bound..bound)
                    }),
                    b: Array1::zeros(io[1]),
                }
            })
            .collect();
        Self { layers }
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![self.layers[0].w.nrows()];
        s.extend(self.layers.iter().map(|l| l.w.ncols()));
        s
    }

    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, Cache) {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x.clone());
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let mut z = acts[l].dot(&layer.w) + &layer.b;
            if l != last {
                z.mapv_inplace(f64::tanh);
            }
            acts.push(z);
        }
        let out = acts.pop().expect("at least one layer");
        (out, Cache { acts })
    }

    pub fn predict(&self, x: &Array2<f64>) -> Array2<f64> {
        self.forward(x).0
    }

    /// Gradients of a scalar loss given `d loss / d output`.
    pub fn backward(&self, cache: &Cache, dout: &Array2<f64>) -> Grads {
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut delta = dout.clone();
        for l in (0..self.layers.len()).rev() {
            let input = &cache.acts[l];
            grads.push((input.t().dot(&delta), delta.sum_axis(Axis(0))));
            if l > 0 {
                let mut back = delta.dot(&self.layers[l].w.t());
                // input to layer l is tanh output a; tanh' = 1 - a^2
                back.zip_mut_with(input, |d, &a| *d *= 1.0 - a * a);
                delta = back;
            }
        }
        grads.reverse();
        grads
    }

    pub fn params(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.w.iter().chain(l.b.iter()).copied().collect::<Vec<_>>())
            .collect()
    }

    pub fn set_params(&mut self, p: &[f64]) {
        let mut it = p.iter().copied();
        for l in &mut self.layers {
            for v in l.w.iter_mut().chain(l.b.iter_mut()) {
                *v = it.next().expect("parameter vector too short");
            }
        }
        assert!(it.next().is_none(), "parameter vector too long");
    }

    pub fn all_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.w.iter().chain(l.b.iter()).all(|v| v.is_finite()))
    }

    pub fn snapshot(&self) -> MlpSnapshot {
        MlpSnapshot {
            sizes: self.sizes(),
            params: self.params(),
        }
    }

    pub fn from_snapshot(s: &MlpSnapshot) -> Result<Self, String> {
        if s.sizes.len() < 2 {
            return Err("snapshot has fewer than two layer sizes".into());
        }
        let expected: usize = s.sizes.windows(2).map(|io| io[0] * io[1] + io[1]).sum();
        if expected != s.params.len() {
            return Err(format!(
                "snapshot has {} parameters, sizes {:?} need {expected}",
                s.params.len(),
                s.sizes
            ));
        }
        let mut m = Self {
            layers: s
                .sizes
                .windows(2)
                .map(|io| Dense {
                    w: Array2::zeros((io[0], io[1])),
                    b: Array1::zeros(io[1]),
                })
                .collect(),
        };
        m.set_params(&s.params);
        Ok(m)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpSnapshot {
    pub sizes: Vec<usize>,
    pub params: Vec<f64>,
}

pub fn grad_norm(g: &Grads) -> f64 {
    g.iter()
        .map(|(w, b)| w.iter().chain(b.iter()).map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

/// Rescale so the global norm is at most `max_norm`. Returns the norm before clipping.
pub fn clip_grads(g: &mut Grads, max_norm: f64) -> f64 {
    let norm = grad_norm(g);
    if norm > max_norm {
        let s = max_norm / norm;
        for (w, b) in g.iter_mut() {
            w.mapv_inplace(|v| v * s);
            b.mapv_inplace(|v| v * s);
        }
    }
    norm
}

#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Grads,
    v: Grads,
}

impl Adam {
    pub fn new(net: &Mlp, lr: f64) -> Self {
        let zeros: Grads = net
            .layers
            .iter()
            .map(|l| (Array2::zeros(l.w.raw_dim()), Array1::zeros(l.b.raw_dim())))
            .collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Descend along `g`.
    pub fn step(&mut self, net: &mut Mlp, g: &Grads) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let (b1, b2, eps, lr) = (self.beta1, self.beta2, self.eps, self.lr);
        for (((layer, (gw, gb)), (mw, mb)), (vw, vb)) in net
            .layers
            .iter_mut()
            .zip(g)
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            let update = |p: &mut f64, g: f64, m: &mut f64, v: &mut f64| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            };
            ndarray::Zip::from(&mut layer.w)
                .and(gw)
                .and(mw)
                .and(vw)
                .for_each(|p, &g, m, v| update(p, g, m, v));
            ndarray::Zip::from(&mut layer.b)
                .and(gb)
                .and(mb)
                .and(vb)
                .for_each(|p, &g, m, v| update(p, g, m, v));
        }
    }
}

/// Row-wise softmax with the max subtracted for stability.
pub fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut p = logits.clone();
    for mut row in p.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|z| (z - m).exp());
        let s = row.sum();
        row.mapv_inplace(|z| z / s);
    }
    p
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};

    /// Half squared norm of the output, whose output gradient is the output itself.
    fn half_sq(net: &Mlp, x: &Array2<f64>) -> f64 {
        0.5 * net.predict(x).iter().map(|v| v * v).sum::<f64>()
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = stream(3, Stream::Init);
        let net = Mlp::new(&[3, 5, 4, 2], 1.0, &mut rng);
        let x = Array2::from_shape_fn((6, 3), |(i, j)| ((i * 3 + j) as f64 * 0.37).sin());
        let (out, cache) = net.forward(&x);
        let analytic: Vec<f64> = net
            .backward(&cache, &out)
            .iter()
            .flat_map(|(w, b)| w.iter().chain(b.iter()).copied().collect::<Vec<_>>())
            .collect();
        let p0 = net.params();
        let h = 1e-6;
        for (i, &g) in analytic.iter().enumerate() {
            let mut plus = net.clone();
            let mut minus = net.clone();
            let mut p = p0.clone();
            p[i] += h;
            plus.set_params(&p);
            p[i] -= 2.0 * h;
            minus.set_params(&p);
            let fd = (half_sq(&plus, &x) - half_sq(&minus, &x)) / (2.0 * h);
            assert!((fd - g).abs() <= 1e-6 * (1.0 + g.abs()), "param {i}: fd {fd} vs {g}");
        }
    }

    #[test]
    fn snapshot_round_trip() {
        let net = Mlp::new(&[6, 8, 3], 0.1, &mut stream(1, Stream::Init));
        let again = Mlp::from_snapshot(&net.snapshot()).unwrap();
        assert_eq!(net, again);
        let mut bad = net.snapshot();
        bad.params.pop();
        assert!(Mlp::from_snapshot(&bad).is_err());
    }

    #[test]
    fn adam_reduces_a_quadratic() {
        let mut net = Mlp::new(&[2, 4, 1], 1.0, &mut stream(2, Stream::Init));
        let x = Array2::from_shape_vec((3, 2), vec![1.0, 0.0, 0.0, 1.0, 0.5, -0.5]).unwrap();
        let mut opt = Adam::new(&net, 1e-2);
        let before = half_sq(&net, &x);
        for _ in 0..200 {
            let (out, cache) = net.forward(&x);
            let g = net.backward(&cache, &out);
            opt.step(&mut net, &g);
        }
        assert!(half_sq(&net, &x) < 0.01 * before);
    }

    #[test]
    fn clipping_caps_global_norm() {
        let mut g: Grads = vec![(Array2::from_elem((2, 2), 3.0), Array1::from_elem(2, 4.0))];
        let before = clip_grads(&mut g, 1.0);
        assert!((before - (4.0 * 9.0 + 2.0 * 16.0f64).sqrt()).abs() < 1e-12);
        assert!((grad_norm(&g) - 1.0).abs() < 1e-12);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn softmax_rows_sum_to_one(seed in any::<u64>(), scale in 0.01f64..50.0) {
                let net = Mlp::new(&[6, 16, 16, 24], scale, &mut stream(seed, Stream::Init));
                let x = Array2::from_shape_fn((4, 6), |(i, j)| (i as f64 - j as f64) * scale);
                let p = softmax_rows(&net.predict(&x));
                for row in p.rows() {
                    prop_assert!((row.sum() - 1.0).abs() < 1e-6);
                    prop_assert!(row.iter().all(|&v| v >= 0.0));
                }
            }
        }
    }
}
