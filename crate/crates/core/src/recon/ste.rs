//! Straight-through gradients from `dL/dŴ` to a layer's rounding parameters.
//!
//! With `u = W / (s1 · exp S)` and the clamp mask `m` (true where the code is
//! inside the grid), round is treated as the identity, so for one element
//!
//! ```text
//! dŴ/ds1 = (q − zp) − m·u        dŴ/dS = −m · s1 · u
//! ```
//!
//! where `q` is the clamped code. `S = L2·U2 + r2 + c2` then contributes
//! `dL2 = G·U2ᵀ`, `dU2 = L2ᵀ·G`, `dr2 = Σ_j G`, `dc2 = Σ_i G`.

use crate::error::{Error, Result};
use crate::lrq::WeightParams;
use crate::quant::qmax;
use crate::tensor::{matmul_nt, matmul_tn, Tensor};

/// Mutable views of the optimized values, in a fixed order:
/// `s1` steps, then `S2` or `L2, U2[, r2, c2]`.
pub fn learnable_slices_mut(p: &mut WeightParams) -> Vec<&mut [f32]> {
    match p {
        WeightParams::Rtn { .. } => Vec::new(),
        WeightParams::Flex(f) => vec![&mut f.s1.step[..], f.s2.data_mut()],
        WeightParams::Lrq(l) => {
            let mut v: Vec<&mut [f32]> = vec![&mut l.s1.step[..], l.l2.data_mut(), l.u2.data_mut()];
            if l.with_bias {
                v.push(l.r2.data_mut());
                v.push(l.c2.data_mut());
            }
            v
        }
    }
}

pub fn learnable_sizes(p: &WeightParams) -> Vec<usize> {
    let mut p = p.clone();
    learnable_slices_mut(&mut p).iter().map(|s| s.len()).collect()
}

/// Gradients matching [`learnable_slices_mut`] for `L` with `dL/dŴ = g`.
pub fn weight_grads(w: &Tensor, p: &WeightParams, bits: u32, g: &Tensor) -> Result<Vec<Vec<f32>>> {
    let (rows, cols) = w.dims2()?;
    w.expect_same_shape(g, "weight_grads")?;
    let scale = match p.scale()? {
        Some(s) => s,
        None => return Ok(Vec::new()),
    };
    let s1 = p.s1();
    if s1.len() != rows {
        return Err(Error::dim("weight_grads", format!("{} steps for {rows} rows", s1.len())));
    }
    let top = qmax(bits);
    let mut g_step = vec![0.0f32; rows];
    let mut g_s = Tensor::zeros(&[rows, cols]);
    for i in 0..rows {
        let step = s1.step[i];
        let zp = s1.zero_point[i] as f32;
        let mut acc = 0.0f64;
        for j in 0..cols {
            let x = w.at(i, j);
            let e = scale.at(i, j).exp();
            // Code and mask exactly as in the forward pass.
            let code = ((x / (step * e)).round() + zp).clamp(0.0, top);
            let inside = (0.0..=top).contains(&((x / (step * e)).round() + zp));
            let gij = g.at(i, j) as f64;
            let qz = (code - zp) as f64;
            if inside {
                let u = x as f64 / (step as f64 * e as f64);
                acc += gij * (qz - u);
                g_s.set(i, j, (-gij * step as f64 * u) as f32);
            } else {
                acc += gij * qz;
            }
        }
        g_step[i] = acc as f32;
    }
    Ok(match p {
        WeightParams::Rtn { .. } => unreachable!("handled above"),
        WeightParams::Flex(_) => vec![g_step, g_s.into_data()],
        WeightParams::Lrq(l) => {
            let g_l2 = matmul_nt(&g_s, &l.u2)?;
            let g_u2 = matmul_tn(&l.l2, &g_s)?;
            let mut out = vec![g_step, g_l2.into_data(), g_u2.into_data()];
            if l.with_bias {
                out.push(g_s.sum_cols()?.into_data());
                out.push(g_s.sum_rows()?.into_data());
            }
            out
        }
    })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::lrq::{LrqParams, RoundVariant};
    use crate::quant::QParams;
    use crate::rng::Rng;

    /// Surrogate forward in f64: round replaced by identity plus the offset
    /// frozen at the base point, clamp replaced by the frozen mask.
    pub(crate) struct Surrogate {
        pub w: Vec<Vec<f64>>,
        pub zp: Vec<f64>,
        pub offset: Vec<Vec<f64>>,
        pub clamped: Vec<Vec<Option<f64>>>,
    }

    pub(crate) fn s_matrix(l2: &[Vec<f64>], u2: &[Vec<f64>], r2: &[f64], c2: &[f64]) -> Vec<Vec<f64>> {
        let (rows, cols, rank) = (r2.len(), c2.len(), u2.len());
        (0..rows)
            .map(|i| {
                (0..cols)
                    .map(|j| (0..rank).map(|k| l2[i][k] * u2[k][j]).sum::<f64>() + r2[i] + c2[j])
                    .collect()
            })
            .collect()
    }

    impl Surrogate {
        pub(crate) fn new(w: Vec<Vec<f64>>, step: &[f64], zp: Vec<f64>, s: &[Vec<f64>], top: f64) -> Self {
            let mut offset = Vec::new();
            let mut clamped = Vec::new();
            for i in 0..w.len() {
                let mut o = Vec::new();
                let mut c = Vec::new();
                for j in 0..w[i].len() {
                    let u = w[i][j] / (step[i] * s[i][j].exp());
                    let q = u.round() + zp[i];
                    o.push(u.round() - u);
                    c.push(if (0.0..=top).contains(&q) { None } else { Some(q.clamp(0.0, top)) });
                }
                offset.push(o);
                clamped.push(c);
            }
            Self { w, zp, offset, clamped }
        }

        pub(crate) fn eval(&self, step: &[f64], s: &[Vec<f64>], g: &[Vec<f64>]) -> f64 {
            let mut total = 0.0;
            for i in 0..self.w.len() {
                for j in 0..self.w[i].len() {
                    let what = match self.clamped[i][j] {
                        Some(q) => step[i] * (q - self.zp[i]),
                        None => {
                            let u = self.w[i][j] / (step[i] * s[i][j].exp());
                            step[i] * (u + self.offset[i][j])
                        }
                    };
                    total += g[i][j] * what;
                }
            }
            total
        }
    }

    fn to64(t: &Tensor) -> Vec<Vec<f64>> {
        (0..t.rows()).map(|i| t.row(i).iter().map(|&v| v as f64).collect()).collect()
    }

    /// Smallest distance of any `u` to a rounding tie.
    pub(crate) fn tie_margin(w: &Tensor, step: &[f32], s: &Tensor) -> f64 {
        let mut m = f64::INFINITY;
        for i in 0..w.rows() {
            for j in 0..w.cols() {
                let u = w.at(i, j) as f64 / (step[i] as f64 * (s.at(i, j) as f64).exp());
                m = m.min(((u - u.floor()) - 0.5).abs());
            }
        }
        m
    }

    /// Random 3×3 LRQ layer away from ties, plus upstream gradient.
    pub(crate) fn random_case(rng: &mut Rng, bits: u32) -> (Tensor, LrqParams, Tensor) {
        loop {
            let w = rng.normal_tensor(&[3, 3], 1.0);
            let rank = 1 + rng.below(3);
            let mut p = crate::lrq::init_lrq(&w, bits, rank, rng, 0.5).unwrap();
            p.l2 = rng.normal_tensor(&[3, rank], 0.3);
            p.r2 = rng.normal_tensor(&[3, 1], 0.2);
            p.c2 = rng.normal_tensor(&[1, 3], 0.2);
            for s in &mut p.s1.step {
                *s *= 0.7 + 0.6 * rng.uniform() as f32;
            }
            let s = crate::lrq::scale_matrix(&p).unwrap();
            if tie_margin(&w, &p.s1.step, &s) > 0.05 {
                let g = rng.normal_tensor(&[3, 3], 1.0);
                return (w, p, g);
            }
        }
    }

    /// Central differences of the surrogate for every learnable value.
    pub(crate) fn fd_grads(w: &Tensor, p: &LrqParams, bits: u32, g: &Tensor, h: f64) -> Vec<Vec<f64>> {
        let step: Vec<f64> = p.s1.step.iter().map(|&v| v as f64).collect();
        let zp: Vec<f64> = p.s1.zero_point.iter().map(|&v| v as f64).collect();
        let (l2, u2) = (to64(&p.l2), to64(&p.u2));
        let r2: Vec<f64> = p.r2.data().iter().map(|&v| v as f64).collect();
        let c2: Vec<f64> = p.c2.data().iter().map(|&v| v as f64).collect();
        let gg = to64(g);
        let top = qmax(bits) as f64;
        let sur = Surrogate::new(to64(w), &step, zp, &s_matrix(&l2, &u2, &r2, &c2), top);
        let eval = |step: &[f64], l2: &[Vec<f64>], u2: &[Vec<f64>], r2: &[f64], c2: &[f64]| {
            sur.eval(step, &s_matrix(l2, u2, r2, c2), &gg)
        };
        let mut out = vec![Vec::new(); 5];
        for i in 0..step.len() {
            let (mut a, mut b) = (step.clone(), step.clone());
            a[i] += h;
            b[i] -= h;
            out[0].push((eval(&a, &l2, &u2, &r2, &c2) - eval(&b, &l2, &u2, &r2, &c2)) / (2.0 * h));
        }
        for i in 0..l2.len() {
            for k in 0..l2[i].len() {
                let (mut a, mut b) = (l2.clone(), l2.clone());
                a[i][k] += h;
                b[i][k] -= h;
                out[1].push((eval(&step, &a, &u2, &r2, &c2) - eval(&step, &b, &u2, &r2, &c2)) / (2.0 * h));
            }
        }
        for k in 0..u2.len() {
            for j in 0..u2[k].len() {
                let (mut a, mut b) = (u2.clone(), u2.clone());
                a[k][j] += h;
                b[k][j] -= h;
                out[2].push((eval(&step, &l2, &a, &r2, &c2) - eval(&step, &l2, &b, &r2, &c2)) / (2.0 * h));
            }
        }
        for i in 0..r2.len() {
            let (mut a, mut b) = (r2.clone(), r2.clone());
            a[i] += h;
            b[i] -= h;
            out[3].push((eval(&step, &l2, &u2, &a, &c2) - eval(&step, &l2, &u2, &b, &c2)) / (2.0 * h));
        }
        for j in 0..c2.len() {
            let (mut a, mut b) = (c2.clone(), c2.clone());
            a[j] += h;
            b[j] -= h;
            out[4].push((eval(&step, &l2, &u2, &r2, &a) - eval(&step, &l2, &u2, &r2, &b)) / (2.0 * h));
        }
        out
    }

    pub(crate) fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
    }

    #[test]
    fn analytic_matches_surrogate_differences() {
        let mut rng = Rng::new(21);
        for case in 0..20 {
            let bits = [2, 3, 4][case % 3];
            let (w, p, g) = random_case(&mut rng, bits);
            let ana = weight_grads(&w, &WeightParams::Lrq(p.clone()), bits, &g).unwrap();
            let fd = fd_grads(&w, &p, bits, &g, 1e-4);
            for (k, (a, f)) in ana.iter().zip(&fd).enumerate() {
                for (x, y) in a.iter().zip(f) {
                    assert!(rel_err(*x as f64, *y) <= 1e-4, "case {case} tensor {k}: {x} vs {y}");
                }
            }
        }
    }

    #[test]
    fn saturated_element_has_no_rounding_path_gradient() {
        let w = Tensor::from_vec(vec![1, 2], vec![100.0, 0.3]).unwrap();
        let p = WeightParams::Flex(crate::lrq::FlexParams {
            s1: QParams {
                step: vec![0.1],
                zero_point: vec![8],
                axis: Some(0),
            },
            s2: Tensor::zeros(&[1, 2]),
        });
        let g = Tensor::from_vec(vec![1, 2], vec![1.0, 0.0]).unwrap();
        let gr = weight_grads(&w, &p, 4, &g).unwrap();
        assert_eq!(gr[1][0], 0.0);
        assert_eq!(gr[0][0], 7.0);
    }

    #[test]
    fn no_bias_variant_has_three_groups() {
        let mut rng = Rng::new(2);
        let w = rng.normal_tensor(&[4, 6], 1.0);
        let p = WeightParams::init(&w, 4, RoundVariant::LrqNoBias, 2, &mut rng, 0.01).unwrap();
        let g = rng.normal_tensor(&[4, 6], 1.0);
        assert_eq!(weight_grads(&w, &p, 4, &g).unwrap().len(), 3);
        assert_eq!(learnable_sizes(&p), vec![4, 8, 12]);
        assert_eq!(learnable_sizes(&p).iter().sum::<usize>(), p.learnable_count());
    }
}
