//! Oracles and random instances shared by the integration tests.
#![allow(dead_code)]

use ctarnn::cta::CtaParams;
use ctarnn::layers::MhsaParams;
use ctarnn::{Graph, Mask, ParamSet, Tensor};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub struct Instance {
    pub h: Tensor<f64>,
    pub lengths: Vec<usize>,
    pub mask: Mask,
    pub ps: ParamSet<f64>,
    pub cta: CtaParams,
}

impl Instance {
    pub fn dims(&self) -> [usize; 4] {
        let s = self.h.shape();
        [s[0], s[1], s[2], s[3]]
    }
}

/// Random CTA problem: `B ≤ 3`, `N ≤ n_max`, `m ≤ 7`, `d_h ≤ 6`, random
/// prefix lengths with at least one valid step per row, weights in ±1.
pub fn random_instance(seed: u64, n_max: usize) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b = rng.gen_range(1..=3);
    let n = rng.gen_range(1..=n_max);
    let m = rng.gen_range(1..=7);
    let d = rng.gen_range(1..=6);
    let heads = rng.gen_range(1..=3);
    let head_dim = rng.gen_range(1..=4);
    instance_with(&mut rng, [b, n, m, d], heads, head_dim)
}

pub fn instance_with(rng: &mut ChaCha8Rng, [b, n, m, d]: [usize; 4], heads: usize, head_dim: usize) -> Instance {
    let h = Tensor::uniform([b, n, m, d], -2.0, 2.0, rng);
    let lengths: Vec<usize> = (0..b).map(|_| rng.gen_range(1..=m)).collect();
    let mask = Mask::from_lengths(&lengths, m);
    let mut ps = ParamSet::new();
    let cta = CtaParams::new(&mut ps, "cta", d, heads, head_dim, rng);
    for t in ps.tensors_mut() {
        *t = Tensor::uniform(t.shape().to_vec(), -1.0, 1.0, rng);
    }
    Instance { h, lengths, mask, ps, cta }
}

/// Per head: `α_t` (`B·N`), `α_c` (`B·m`), `A` (`B·m·N`); and `v` (`B·n_α·d_α`).
pub struct AttentionValues {
    pub alpha_t: Vec<Vec<f64>>,
    pub alpha_c: Vec<Vec<f64>>,
    pub a: Vec<Vec<f64>>,
    pub v: Vec<f64>,
}

pub fn run_cta(inst: &Instance, h: &Tensor<f64>, mask: &Mask) -> AttentionValues {
    let mut g = Graph::new();
    let bound = inst.ps.bind_constant(&mut g);
    let hv = g.constant(h.clone());
    let att = inst.cta.attend(&mut g, &bound, hv, mask).unwrap();
    let get = |v| g.value(v).data().to_vec();
    AttentionValues {
        alpha_t: att.alpha_t.iter().map(|&v| get(v)).collect(),
        alpha_c: att.alpha_c.iter().map(|&v| get(v)).collect(),
        a: att.a.iter().map(|&v| get(v)).collect(),
        v: get(att.v),
    }
}

fn mat(ps: &ParamSet<f64>, id: ctarnn::ParamId) -> (Vec<f64>, usize, usize) {
    let t = ps.get(id);
    (t.data().to_vec(), t.shape()[0], t.shape()[1])
}

fn softmax(x: &[f64]) -> Vec<f64> {
    let mx = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - mx).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// `w_q · (w_k · x) / √d_α` with `w_q` `1 × d_α` and `w_k` `d_α × d`.
fn bilinear(wq: &(Vec<f64>, usize, usize), wk: &(Vec<f64>, usize, usize), x: &[f64]) -> f64 {
    let (da, d) = (wk.1, wk.2);
    let mut s = 0.0;
    for k in 0..da {
        let key: f64 = (0..d).map(|i| wk.0[k * d + i] * x[i]).sum();
        s += wq.0[k] * key;
    }
    s / (da as f64).sqrt()
}

/// CTA evaluated element by element with plain loops.
pub fn cta_oracle(inst: &Instance) -> AttentionValues {
    let [b, n, m, d] = inst.dims();
    let x = inst.h.data();
    let at = |bi: usize, c: usize, t: usize, i: usize| x[((bi * n + c) * m + t) * d + i];
    let mut out = AttentionValues {
        alpha_t: vec![Vec::new(); inst.cta.heads.len()],
        alpha_c: vec![Vec::new(); inst.cta.heads.len()],
        a: vec![Vec::new(); inst.cta.heads.len()],
        v: Vec::new(),
    };
    for bi in 0..b {
        let len = inst.lengths[bi];
        // H̃_c[t] = mean over channels; H̃_t[c] = mean over valid steps
        let hc: Vec<Vec<f64>> = (0..m)
            .map(|t| (0..d).map(|i| (0..n).map(|c| at(bi, c, t, i)).sum::<f64>() / n as f64).collect())
            .collect();
        let ht: Vec<Vec<f64>> = (0..n)
            .map(|c| (0..d).map(|i| (0..len).map(|t| at(bi, c, t, i)).sum::<f64>() / len as f64).collect())
            .collect();
        for (j, head) in inst.cta.heads.iter().enumerate() {
            let (wqt, wkt) = (mat(&inst.ps, head.w_q_t), mat(&inst.ps, head.w_k_t));
            let (wqc, wkc) = (mat(&inst.ps, head.w_q_c), mat(&inst.ps, head.w_k_c));
            let wv = mat(&inst.ps, head.w_v);
            let alpha_t = softmax(&(0..n).map(|c| bilinear(&wqt, &wkt, &ht[c])).collect::<Vec<_>>());
            let valid = softmax(&(0..len).map(|t| bilinear(&wqc, &wkc, &hc[t])).collect::<Vec<_>>());
            let alpha_c: Vec<f64> = (0..m).map(|t| if t < len { valid[t] } else { 0.0 }).collect();
            let mut a = vec![0.0; m * n];
            for t in 0..m {
                for c in 0..n {
                    a[t * n + c] = alpha_c[t] * alpha_t[c];
                }
            }
            for k in 0..wv.1 {
                let mut s = 0.0;
                for t in 0..m {
                    for c in 0..n {
                        let proj: f64 = (0..d).map(|i| wv.0[k * d + i] * at(bi, c, t, i)).sum();
                        s += a[t * n + c] * proj;
                    }
                }
                out.v.push(s);
            }
            out.alpha_t[j].extend(alpha_t);
            out.alpha_c[j].extend(alpha_c);
            out.a[j].extend(a);
        }
    }
    out
}

/// MHSA parameters matching a CTA instance: `W_Q, W_K` from the temporal
/// branch (`w_q_c`, `w_k_c`) and the shared `W_V`.
pub fn matching_mhsa(inst: &Instance) -> (ParamSet<f64>, MhsaParams) {
    let mut ps = ParamSet::new();
    let heads = inst.cta.heads.len();
    let mhsa = MhsaParams::new(&mut ps, "att", inst.cta.d_h, heads, inst.cta.head_dim, &mut ChaCha8Rng::seed_from_u64(0));
    for (hm, hc) in mhsa.heads.iter().zip(&inst.cta.heads) {
        *ps.get_mut(hm.w_q) = inst.ps.get(hc.w_q_c).clone();
        *ps.get_mut(hm.w_k) = inst.ps.get(hc.w_k_c).clone();
        *ps.get_mut(hm.w_v) = inst.ps.get(hc.w_v).clone();
    }
    (ps, mhsa)
}

/// Per-class recall averaged over classes present in `labels`.
pub fn uar_oracle(labels: &[usize], preds: &[usize], n_classes: usize) -> f64 {
    let mut recalls = Vec::new();
    for k in 0..n_classes {
        let members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == k).collect();
        if members.is_empty() {
            continue;
        }
        let hits = members.iter().filter(|&&i| preds[i] == k).count();
        recalls.push(hits as f64 / members.len() as f64);
    }
    recalls.iter().sum::<f64>() / recalls.len() as f64
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "length mismatch");
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Largest violation of the distribution properties over all heads and rows:
/// negativity, `|Σ − 1|` for `α_t`, `α_c` and `A`, and weight on padding.
pub fn distribution_error(inst: &Instance) -> f64 {
    let [b, n, m, _] = inst.dims();
    let out = run_cta(inst, &inst.h, &inst.mask);
    let mut worst: f64 = 0.0;
    for j in 0..inst.cta.heads.len() {
        for bi in 0..b {
            let t = &out.alpha_t[j][bi * n..(bi + 1) * n];
            let c = &out.alpha_c[j][bi * m..(bi + 1) * m];
            let a = &out.a[j][bi * m * n..(bi + 1) * m * n];
            let neg = t.iter().chain(c).chain(a).fold(0.0f64, |w, &x| w.max(-x));
            worst = worst
                .max(neg)
                .max((t.iter().sum::<f64>() - 1.0).abs())
                .max((c.iter().sum::<f64>() - 1.0).abs())
                .max((a.iter().sum::<f64>() - 1.0).abs())
                .max(c[inst.lengths[bi]..].iter().fold(0.0, |w, &x| w.max(x.abs())));
        }
    }
    worst
}

/// Max change in `v`, `α_t`, valid `α_c` and valid `A` when padded positions
/// are overwritten with large noise and when extra padded steps are appended.
pub fn padding_error(inst: &Instance, rng: &mut ChaCha8Rng) -> f64 {
    let [b, n, m, d] = inst.dims();
    let base = run_cta(inst, &inst.h, &inst.mask);

    let mut scrambled = inst.h.clone();
    for (i, x) in scrambled.data_mut().iter_mut().enumerate() {
        let bi = i / (n * m * d);
        let t = (i / d) % m;
        if t >= inst.lengths[bi] {
            *x = rng.gen_range(-50.0..50.0);
        }
    }
    let s = run_cta(inst, &scrambled, &inst.mask);
    let mut worst = max_abs_diff(&base.v, &s.v);

    let extra = rng.gen_range(1..4);
    let m2 = m + extra;
    let src = inst.h.data();
    let h = Tensor::from_fn([b, n, m2, d], |i| {
        let (row, k) = (i / d, i % d);
        let (bc, t) = (row / m2, row % m2);
        if t < m {
            src[(bc * m + t) * d + k]
        } else {
            rng.gen_range(-50.0..50.0)
        }
    });
    let p = run_cta(inst, &h, &Mask::from_lengths(&inst.lengths, m2));
    worst = worst.max(max_abs_diff(&base.v, &p.v));
    for j in 0..inst.cta.heads.len() {
        worst = worst.max(max_abs_diff(&base.alpha_t[j], &p.alpha_t[j]));
        for bi in 0..b {
            worst = worst.max(max_abs_diff(&base.alpha_c[j][bi * m..(bi + 1) * m], &p.alpha_c[j][bi * m2..bi * m2 + m]));
            worst = worst.max(max_abs_diff(
                &base.a[j][bi * m * n..(bi + 1) * m * n],
                &p.a[j][bi * m2 * n..(bi * m2 + m) * n],
            ));
        }
    }
    worst
}

/// Max deviation from equivariance when the channels of `H` are permuted:
/// `v` and `α_c` unchanged, `α_t` and the columns of `A` permuted alike.
pub fn permutation_error(inst: &Instance, rng: &mut ChaCha8Rng) -> f64 {
    use rand::seq::SliceRandom;
    let [b, n, m, d] = inst.dims();
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(rng);
    // channel c of the permuted input is channel perm[c] of the original
    let src = inst.h.data();
    let inner = m * d;
    let h = Tensor::from_fn([b, n, m, d], |i| {
        let (bi, c, r) = (i / (n * inner), (i / inner) % n, i % inner);
        src[(bi * n + perm[c]) * inner + r]
    });
    let base = run_cta(inst, &inst.h, &inst.mask);
    let out = run_cta(inst, &h, &inst.mask);
    let mut worst = max_abs_diff(&base.v, &out.v);
    for j in 0..inst.cta.heads.len() {
        worst = worst.max(max_abs_diff(&base.alpha_c[j], &out.alpha_c[j]));
        for bi in 0..b {
            for c in 0..n {
                worst = worst.max((base.alpha_t[j][bi * n + perm[c]] - out.alpha_t[j][bi * n + c]).abs());
                for t in 0..m {
                    worst = worst.max((base.a[j][(bi * m + t) * n + perm[c]] - out.a[j][(bi * m + t) * n + c]).abs());
                }
            }
        }
    }
    worst
}

/// Max |engine − loop oracle| over `v`, `α_t`, `α_c` and `A`.
pub fn oracle_error(inst: &Instance) -> f64 {
    let got = run_cta(inst, &inst.h, &inst.mask);
    let want = cta_oracle(inst);
    let mut worst = max_abs_diff(&got.v, &want.v);
    for j in 0..inst.cta.heads.len() {
        worst = worst
            .max(max_abs_diff(&got.alpha_t[j], &want.alpha_t[j]))
            .max(max_abs_diff(&got.alpha_c[j], &want.alpha_c[j]))
            .max(max_abs_diff(&got.a[j], &want.a[j]));
    }
    worst
}

/// Max |CTA − MHSA| (over `v` and the temporal weights) for a one-channel
/// instance with matching weights.
pub fn reduction_error(inst: &Instance) -> f64 {
    let [b, n, m, d] = inst.dims();
    assert_eq!(n, 1, "reduction needs a single channel");
    let cta = run_cta(inst, &inst.h, &inst.mask);
    let (ps, mhsa) = matching_mhsa(inst);
    let mut g = Graph::new();
    let bound = ps.bind_constant(&mut g);
    let h = g.constant(inst.h.clone().reshape([b, m, d]).unwrap());
    let out = mhsa.pool(&mut g, &bound, h, &inst.mask).unwrap();
    let mut worst = max_abs_diff(&cta.v, g.value(out.v).data());
    for (a, al) in cta.alpha_c.iter().zip(&out.alphas) {
        worst = worst.max(max_abs_diff(a, g.value(*al).data()));
    }
    worst
}

/// Random single-channel instance.
pub fn single_channel_instance(seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b = rng.gen_range(1..=3);
    let m = rng.gen_range(1..=8);
    let d = rng.gen_range(1..=6);
    let heads = rng.gen_range(1..=3);
    let head_dim = rng.gen_range(1..=4);
    instance_with(&mut rng, [b, 1, m, d], heads, head_dim)
}
