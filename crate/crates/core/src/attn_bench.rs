//! Wall-clock comparison of CTA attention against flat global attention.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cta::{flat_global_attention, CtaParams};
use crate::error::{Error, Result};
use crate::layers::MhsaParams;
use crate::par::{self, Execution};
use crate::params::ParamSet;
use crate::tensor::{Graph, Mask, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttnBenchConfig {
    pub n_list: Vec<usize>,
    pub m: usize,
    pub d_h: usize,
    pub batch: usize,
    pub heads: usize,
    pub head_dim: usize,
    /// Timed repetitions per setting; the minimum of the summed per-chunk
    /// times is reported.
    pub reps: usize,
    pub seed: u64,
}

impl Default for AttnBenchConfig {
    fn default() -> Self {
        AttnBenchConfig {
            n_list: vec![4, 8, 16],
            m: 200,
            d_h: 64,
            batch: 8,
            heads: 2,
            head_dim: 64,
            reps: 20,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttnBenchRow {
    pub n: usize,
    pub m: usize,
    pub d_h: usize,
    pub cta_ms: f64,
    pub flat_ms: f64,
    /// `flat_ms / cta_ms`.
    pub ratio: f64,
    /// For `N = 1`: max |CTA − MHSA| with matching temporal weights.
    pub n1_parity: Option<f64>,
}

pub const TSV_HEADER: &str = "N\tm\td_h\tcta_ms\tflat_ms\tratio\tn1_parity";

impl AttnBenchRow {
    pub fn tsv(&self) -> String {
        let parity = self.n1_parity.map_or("-".to_string(), |p| format!("{p:.3e}"));
        format!(
            "{}\t{}\t{}\t{:.4}\t{:.4}\t{:.4}\t{}",
            self.n, self.m, self.d_h, self.cta_ms, self.flat_ms, self.ratio, parity
        )
    }
}

struct Setup {
    ps: ParamSet<f32>,
    cta: CtaParams,
    mhsa: MhsaParams,
    chunks: Vec<Tensor<f32>>,
    mask: Mask,
}

fn setup(cfg: &AttnBenchConfig, n: usize, exec: Execution) -> Setup {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ n as u64);
    let mut ps = ParamSet::new();
    let cta = CtaParams::new(&mut ps, "cta", cfg.d_h, cfg.heads, cfg.head_dim, &mut rng);
    let mhsa = MhsaParams::new(&mut ps, "flat", cfg.d_h, cfg.heads, cfg.head_dim, &mut rng);
    // one chunk of the batch per worker
    let workers = par::workers(exec).clamp(1, cfg.batch);
    let per = cfg.batch.div_ceil(workers);
    let chunks = (0..cfg.batch)
        .step_by(per)
        .map(|s| Tensor::uniform([per.min(cfg.batch - s), n, cfg.m, cfg.d_h], -1.0, 1.0, &mut rng))
        .collect();
    Setup {
        ps,
        cta,
        mhsa,
        chunks,
        mask: Mask::all([per, cfg.m]),
    }
}

/// Milliseconds spent in `op` alone; graph setup is not timed.
fn timed<F: FnOnce(&mut Graph<f32>, &crate::params::Bound, crate::tensor::Var) -> Result<()>>(
    s: &Setup,
    h: &Tensor<f32>,
    op: F,
) -> Result<f64> {
    let mut g = Graph::new();
    let b = s.ps.bind_constant(&mut g);
    let hv = g.constant(h.clone());
    let t = Instant::now();
    op(&mut g, &b, hv)?;
    Ok(t.elapsed().as_secs_f64() * 1e3)
}

fn chunk_mask(s: &Setup, h: &Tensor<f32>) -> Mask {
    s.mask.narrow_rows(0, h.shape()[0])
}

/// Times inference-mode CTA attention and flat attention over all `N·m`
/// positions for every `N` in the list.
pub fn bench_attention(cfg: &AttnBenchConfig, exec: Execution) -> Result<Vec<AttnBenchRow>> {
    if cfg.n_list.is_empty() || cfg.m == 0 || cfg.d_h == 0 || cfg.batch == 0 || cfg.reps == 0 {
        return Err(Error::Config("bench-attn: N list, m, d, batch and reps must be non-empty".into()));
    }
    cfg.n_list
        .iter()
        .map(|&n| {
            if n == 0 {
                return Err(Error::Config("bench-attn: N must be positive".into()));
            }
            let s = setup(cfg, n, exec);
            let cta = |h: &Tensor<f32>| timed(&s, h, |g, b, hv| s.cta.attend(g, b, hv, &chunk_mask(&s, h)).map(|_| ()));
            let flat = |h: &Tensor<f32>| {
                timed(&s, h, |g, b, hv| flat_global_attention(g, b, hv, &chunk_mask(&s, h), &s.mhsa).map(|_| ()))
            };
            let total = |times: Vec<f64>| times.iter().sum::<f64>();
            // one warm-up round, then alternate so drift hits both equally
            par::try_map(exec, &s.chunks, cta)?;
            par::try_map(exec, &s.chunks, flat)?;
            let (mut cta_ms, mut flat_ms) = (f64::INFINITY, f64::INFINITY);
            for _ in 0..cfg.reps {
                cta_ms = cta_ms.min(total(par::try_map(exec, &s.chunks, cta)?));
                flat_ms = flat_ms.min(total(par::try_map(exec, &s.chunks, flat)?));
            }
            let n1_parity = if n == 1 { Some(n1_parity(&s)?) } else { None };
            Ok(AttnBenchRow {
                n,
                m: cfg.m,
                d_h: cfg.d_h,
                cta_ms,
                flat_ms,
                ratio: flat_ms / cta_ms,
                n1_parity,
            })
        })
        .collect()
}

/// Copies the CTA temporal-branch weights into the flat head and compares.
fn n1_parity(s: &Setup) -> Result<f64> {
    let mut ps = s.ps.clone();
    for (f, c) in s.mhsa.heads.iter().zip(&s.cta.heads) {
        *ps.get_mut(f.w_q) = ps.get(c.w_q_c).clone();
        *ps.get_mut(f.w_k) = ps.get(c.w_k_c).clone();
        *ps.get_mut(f.w_v) = ps.get(c.w_v).clone();
    }
    let h = &s.chunks[0];
    let mut g = Graph::new();
    let b = ps.bind_constant(&mut g);
    let hv = g.constant(h.clone());
    let mask = chunk_mask(s, h);
    let a = s.cta.attend(&mut g, &b, hv, &mask)?.v;
    let f = flat_global_attention(&mut g, &b, hv, &mask, &s.mhsa)?.v;
    Ok(g
        .value(a)
        .data()
        .iter()
        .zip(g.value(f).data())
        .map(|(x, y)| (x - y).abs() as f64)
        .fold(0.0, f64::max))
}
