//! Plain-loop reference implementations, batch 1, `[c][h][w]` flat layout.
#![allow(dead_code)]

use demoire::tensor::{ParamId, ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Debug)]
pub struct Img {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub d: Vec<f64>,
}

impl Img {
    pub fn from_tensor(t: &Tensor<f64>) -> Self {
        let [n, c, h, w] = t.shape();
        assert_eq!(n, 1);
        Self {
            c,
            h,
            w,
            d: t.data().to_vec(),
        }
    }

    pub fn hw(&self) -> usize {
        self.h * self.w
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.d[(c * self.h + y) * self.w + x]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            d: self.d.iter().map(|&v| f(v)).collect(),
            ..self.clone()
        }
    }

    pub fn zip(&self, o: &Img, f: impl Fn(f64, f64) -> f64) -> Self {
        assert_eq!((self.c, self.h, self.w), (o.c, o.h, o.w));
        Self {
            d: self.d.iter().zip(&o.d).map(|(&a, &b)| f(a, b)).collect(),
            ..self.clone()
        }
    }

    pub fn channels(&self, start: usize, len: usize) -> Self {
        let hw = self.hw();
        Self {
            c: len,
            h: self.h,
            w: self.w,
            d: self.d[start * hw..(start + len) * hw].to_vec(),
        }
    }

    pub fn concat(parts: &[&Img]) -> Self {
        let mut d = Vec::new();
        for p in parts {
            d.extend_from_slice(&p.d);
        }
        Self {
            c: parts.iter().map(|p| p.c).sum(),
            h: parts[0].h,
            w: parts[0].w,
            d,
        }
    }

    pub fn max_diff(&self, t: &Tensor<f64>) -> f64 {
        assert_eq!(t.len(), self.d.len());
        self.d
            .iter()
            .zip(t.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

pub fn pv(store: &ParamStore<f64>, id: ParamId) -> Vec<f64> {
    store.tensor(id).data().to_vec()
}

pub fn conv1x1(x: &Img, w: &[f64], b: Option<&[f64]>) -> Img {
    let co = w.len() / x.c;
    let hw = x.hw();
    let mut d = vec![0.0; co * hw];
    for o in 0..co {
        for p in 0..hw {
            let mut s = b.map_or(0.0, |b| b[o]);
            for i in 0..x.c {
                s += w[o * x.c + i] * x.d[i * hw + p];
            }
            d[o * hw + p] = s;
        }
    }
    Img { c: co, h: x.h, w: x.w, d }
}

pub fn dwconv(x: &Img, k: &[f64], dil: usize) -> Img {
    let mut d = vec![0.0; x.d.len()];
    for c in 0..x.c {
        for y in 0..x.h as isize {
            for xx in 0..x.w as isize {
                let mut s = 0.0;
                for ky in 0..3isize {
                    for kx in 0..3isize {
                        let sy = y + (ky - 1) * dil as isize;
                        let sx = xx + (kx - 1) * dil as isize;
                        if sy >= 0 && sx >= 0 && (sy as usize) < x.h && (sx as usize) < x.w {
                            s += k[c * 9 + (ky * 3 + kx) as usize] * x.at(c, sy as usize, sx as usize);
                        }
                    }
                }
                d[(c * x.h + y as usize) * x.w + xx as usize] = s;
            }
        }
    }
    Img { d, ..x.clone() }
}

pub fn layer_norm(x: &Img, g: &[f64], b: &[f64], eps: f64) -> Img {
    let hw = x.hw();
    let mut d = vec![0.0; x.d.len()];
    for p in 0..hw {
        let vals: Vec<f64> = (0..x.c).map(|c| x.d[c * hw + p]).collect();
        let mean = vals.iter().sum::<f64>() / x.c as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / x.c as f64;
        for c in 0..x.c {
            d[c * hw + p] = (vals[c] - mean) / (var + eps).sqrt() * g[c] + b[c];
        }
    }
    Img { d, ..x.clone() }
}

pub fn gelu(v: f64) -> f64 {
    0.5 * v * (1.0 + libm::erf(v / std::f64::consts::SQRT_2))
}

pub fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

pub fn relu(v: f64) -> f64 {
    v.max(0.0)
}

/// Transposed attention, returns `(out, attn[head][i][j])`.
pub fn channel_attention(q: &Img, k: &Img, v: &Img, tau: &[f64], heads: usize) -> (Img, Vec<Vec<Vec<f64>>>) {
    let hw = q.hw();
    let d = q.c / heads;
    let unit = |x: &Img, c: usize| -> Vec<f64> {
        let row = &x.d[c * hw..(c + 1) * hw];
        let n = row.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-12);
        row.iter().map(|a| a / n).collect()
    };
    let mut out = vec![0.0; v.d.len()];
    let mut attn = Vec::new();
    for hd in 0..heads {
        let mut mat = vec![vec![0.0; d]; d];
        for i in 0..d {
            let qi = unit(q, hd * d + i);
            let logits: Vec<f64> = (0..d)
                .map(|j| {
                    let kj = unit(k, hd * d + j);
                    qi.iter().zip(&kj).map(|(a, b)| a * b).sum::<f64>() / (d as f64).sqrt() * tau[hd]
                })
                .collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for j in 0..d {
                mat[i][j] = e[j] / z;
            }
            for p in 0..hw {
                out[(hd * d + i) * hw + p] = (0..d).map(|j| mat[i][j] * v.d[(hd * d + j) * hw + p]).sum();
            }
        }
        attn.push(mat);
    }
    (Img { d: out, ..v.clone() }, attn)
}

/// Adds uniform noise of `scale` to every parameter, so zero-initialized
/// projections stop masking upstream gradients.
pub fn perturb(store: &mut ParamStore<f64>, scale: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in store.iter_mut() {
        for v in p.tensor.data_mut() {
            *v += rng.random_range(-scale..scale);
        }
    }
}

pub fn random_tensor(shape: [usize; 4], lo: f64, hi: f64, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}
