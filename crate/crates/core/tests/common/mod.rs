#![allow(dead_code)]

//! Random small networks built from graph ops with an f64 reference forward
//! pass, and a brute-force prefix code search.

use rae_core::tensor::{Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
pub struct Net {
    h: usize,
    w: usize,
    cin: usize,
    c1: usize,
    classes: usize,
    pool: bool,
    skip: bool,
    label: usize,
    // x, k1, b1, k2, b2, wd, bd
    params: Vec<Vec<f32>>,
}

fn rand_vec(rng: &mut ChaCha8Rng, n: usize, scale: f32) -> Vec<f32> {
    (0..n).map(|_| rng.gen_range(-scale..scale)).collect()
}

impl Net {
    pub fn random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = 2 * rng.gen_range(1..=3);
        let w = 2 * rng.gen_range(1..=3);
        let cin = rng.gen_range(1..=3);
        let c1 = rng.gen_range(1..=4);
        let classes = rng.gen_range(2..=5);
        let pool = rng.gen_bool(0.5);
        let skip = rng.gen_bool(0.5);
        let label = rng.gen_range(0..classes);
        let feat = if pool { h * w * c1 / 4 } else { h * w * c1 };
        let params = vec![
            rand_vec(&mut rng, h * w * cin, 1.0),
            rand_vec(&mut rng, 9 * cin * c1, 0.6),
            rand_vec(&mut rng, c1, 0.2),
            rand_vec(&mut rng, 9 * c1 * c1, 0.4),
            rand_vec(&mut rng, c1, 0.2),
            rand_vec(&mut rng, classes * feat, 0.5),
            rand_vec(&mut rng, classes, 0.2),
        ];
        Self { h, w, cin, c1, classes, pool, skip, label, params }
    }

    fn shapes(&self) -> Vec<Vec<usize>> {
        let feat = self.params[5].len() / self.classes;
        vec![
            vec![self.h, self.w, self.cin],
            vec![3, 3, self.cin, self.c1],
            vec![self.c1],
            vec![3, 3, self.c1, self.c1],
            vec![self.c1],
            vec![self.classes, feat],
            vec![self.classes],
        ]
    }

    pub fn num_inputs(&self) -> usize {
        self.params.iter().map(Vec::len).sum()
    }

    /// Loss and gradient with respect to every input, flattened in order.
    pub fn autodiff(&self) -> (f32, Vec<f32>) {
        let mut g = Graph::new();
        let leaves: Vec<_> = self
            .params
            .iter()
            .zip(self.shapes())
            .map(|(p, s)| g.leaf(Tensor::new(s, p.clone()).unwrap()))
            .collect();
        let z = g.conv2d(leaves[0], leaves[1], leaves[2]).unwrap();
        let z = g.relu(z).unwrap();
        let mut v = g.conv2d(z, leaves[3], leaves[4]).unwrap();
        if self.skip {
            v = g.add(v, z).unwrap();
        }
        let mut v = g.relu(v).unwrap();
        if self.pool {
            v = g.maxpool2x2(v).unwrap();
        }
        let sq = g.mul(v, v).unwrap();
        let sq = g.scale(sq, 0.1).unwrap();
        let v = g.add(v, sq).unwrap();
        let logits = g.dense(v, leaves[5], leaves[6]).unwrap();
        let loss = g.softmax_cross_entropy(logits, self.label).unwrap();
        let grads = g.backward(loss).unwrap();
        let flat = leaves.iter().flat_map(|&l| grads.get(l).unwrap().data().to_vec()).collect();
        (g.value(loss).item(), flat)
    }

    /// Loss with input `i` (flattened index) perturbed by `d`, in f64.
    pub fn reference_loss(&self, i: usize, d: f64) -> f64 {
        let mut p: Vec<Vec<f64>> = self.params.iter().map(|v| v.iter().map(|&a| a as f64).collect()).collect();
        let mut k = i;
        for part in p.iter_mut() {
            if k < part.len() {
                part[k] += d;
                break;
            }
            k -= part.len();
        }
        let (h, w) = (self.h, self.w);
        let z: Vec<f64> = conv(&p[0], h, w, self.cin, &p[1], &p[2], self.c1).into_iter().map(|a| a.max(0.0)).collect();
        let mut v = conv(&z, h, w, self.c1, &p[3], &p[4], self.c1);
        if self.skip {
            v.iter_mut().zip(&z).for_each(|(a, b)| *a += b);
        }
        let mut v: Vec<f64> = v.into_iter().map(|a| a.max(0.0)).collect();
        if self.pool {
            v = pool(&v, h, w, self.c1);
        }
        let v: Vec<f64> = v.iter().map(|a| a + 0.1 * a * a).collect();
        let logits: Vec<f64> = (0..self.classes)
            .map(|o| p[6][o] + (0..v.len()).map(|j| p[5][o * v.len() + j] * v[j]).sum::<f64>())
            .collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
        lse - logits[self.label]
    }
}

fn conv(x: &[f64], h: usize, w: usize, cin: usize, k: &[f64], b: &[f64], cout: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * w * cout];
    for r in 0..h {
        for c in 0..w {
            for o in 0..cout {
                let mut s = b[o];
                for dy in 0..3 {
                    for dx in 0..3 {
                        let (sr, sc) = (r as isize + dy as isize - 1, c as isize + dx as isize - 1);
                        if sr < 0 || sc < 0 || sr >= h as isize || sc >= w as isize {
                            continue;
                        }
                        for i in 0..cin {
                            s += x[(sr as usize * w + sc as usize) * cin + i] * k[((dy * 3 + dx) * cin + i) * cout + o];
                        }
                    }
                }
                out[(r * w + c) * cout + o] = s;
            }
        }
    }
    out
}

fn pool(x: &[f64], h: usize, w: usize, c: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(h * w * c / 4);
    for r in 0..h / 2 {
        for col in 0..w / 2 {
            for ch in 0..c {
                let at = |dy: usize, dx: usize| x[((2 * r + dy) * w + 2 * col + dx) * c + ch];
                out.push(at(0, 0).max(at(0, 1)).max(at(1, 0)).max(at(1, 1)));
            }
        }
    }
    out
}

/// `‖a − b‖₂ / ‖b‖₂` between the autodiff gradient and an f64 central
/// difference, plus the loss gap between the two forward passes.
pub fn gradient_error(net: &Net) -> (f64, f64) {
    const H: f64 = 1e-6;
    let (loss, auto) = net.autodiff();
    let fd: Vec<f64> = (0..net.num_inputs())
        .map(|i| (net.reference_loss(i, H) - net.reference_loss(i, -H)) / (2.0 * H))
        .collect();
    let diff: f64 = auto.iter().zip(&fd).map(|(&a, &f)| (a as f64 - f).powi(2)).sum::<f64>().sqrt();
    let norm: f64 = fd.iter().map(|f| f * f).sum::<f64>().sqrt();
    let loss_gap = (loss as f64 - net.reference_loss(0, 0.0)).abs();
    (diff / norm.max(1e-12), loss_gap)
}

/// Minimum of `Σ f·l` over prefix codes with lengths in `1..=3`; symbols with
/// zero frequency may go uncoded.
pub fn brute_force_cost(freqs: &[u64; 5]) -> u64 {
    let mut best = u64::MAX;
    for code in 0..4u32.pow(5) {
        let l: [u32; 5] = std::array::from_fn(|i| code / 4u32.pow(i as u32) % 4);
        if l.iter().zip(freqs).any(|(&x, &f)| x == 0 && f > 0) {
            continue;
        }
        if l.iter().filter(|&&x| x > 0).map(|&x| 8 >> x).sum::<u32>() <= 8 {
            best = best.min(freqs.iter().zip(&l).map(|(&f, &x)| f * x as u64).sum());
        }
    }
    best
}
