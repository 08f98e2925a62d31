//! Loss along filter-normalised random directions.

use rand_distr::{Distribution, StandardNormal};

use crate::backbone::ModelParams;
use crate::data::{sample_episode, DomainSpec, Episode};
use crate::error::{invalid, Result};
use crate::rng;

/// Gaussian direction rescaled per filter to the parameter filter's norm.
///
/// Conv weights `(C_out, C_in, 3, 3)` have one filter per output channel;
/// the head weight `(D, N_c)` has one per output unit (column). Biases get a
/// zero component, as does any filter whose parameters have zero norm.
pub fn filter_normalized_direction(params: &ModelParams, seed: u64) -> Vec<f64> {
    let mut r = rng::stream(seed, &[rng::tag("direction")]);
    let mut out = Vec::with_capacity(params.num_params());
    for t in &params.tensors {
        let mut d: Vec<f64> = t.data.iter().map(|_| StandardNormal.sample(&mut r)).collect();
        // (index list of each filter) as (start, stride, len)
        let filters: Vec<(usize, usize, usize)> = match t.shape.as_slice() {
            [co, ci, kh, kw] => {
                let len = ci * kh * kw;
                (0..*co).map(|o| (o * len, 1, len)).collect()
            }
            [rows, cols] => (0..*cols).map(|c| (c, *cols, *rows)).collect(),
            _ => {
                d.fill(0.0);
                Vec::new()
            }
        };
        for (start, stride, len) in filters {
            let idx = || (0..len).map(|i| start + i * stride);
            let pn = idx().map(|i| t.data[i] * t.data[i]).sum::<f64>().sqrt();
            let dn = idx().map(|i| d[i] * d[i]).sum::<f64>().sqrt();
            let s = if pn == 0.0 || dn == 0.0 { 0.0 } else { pn / dn };
            for i in idx() {
                d[i] *= s;
            }
        }
        out.extend(d);
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct Landscape {
    pub dims: usize,
    pub center: f64,
    /// `(alpha1, alpha2, loss)`; `alpha2` is 0 for a 1-D probe.
    pub points: Vec<(f64, f64, f64)>,
}

impl Landscape {
    /// `mean(grid) - center`.
    pub fn sharpness(&self) -> f64 {
        self.points.iter().map(|p| p.2).sum::<f64>() / self.points.len() as f64 - self.center
    }
}

/// `radius * (2i - (steps - 1)) / (steps - 1)`, exactly 0 at the middle of an odd grid.
pub fn grid(radius: f64, steps: usize) -> Vec<f64> {
    if steps == 1 {
        return vec![0.0];
    }
    let s = (steps - 1) as f64;
    (0..steps).map(|i| radius * (2.0 * i as f64 - s) / s).collect()
}

/// Evaluates `loss` at `params + a1 * d1 (+ a2 * d2)` over a uniform grid.
pub fn probe_landscape<F>(params: &ModelParams, loss: F, dims: usize, radius: f64, steps: usize, seed: u64) -> Result<Landscape>
where
    F: Fn(&ModelParams) -> Result<f64>,
{
    if !(dims == 1 || dims == 2) {
        return Err(invalid(format!("landscape: dims must be 1 or 2, got {dims}")));
    }
    if steps == 0 || !(radius >= 0.0) {
        return Err(invalid("landscape: need steps >= 1 and radius >= 0"));
    }
    let base = params.flatten();
    let d1 = filter_normalized_direction(params, rng::derive(seed, &[1]));
    let d2 = filter_normalized_direction(params, rng::derive(seed, &[2]));
    let alphas = grid(radius, steps);
    let second: Vec<f64> = if dims == 2 { alphas.clone() } else { vec![0.0] };
    let mut probe = params.clone();
    let mut points = Vec::with_capacity(alphas.len() * second.len());
    for &a1 in &alphas {
        for &a2 in &second {
            let mut i = 0;
            for t in &mut probe.tensors {
                for v in &mut t.data {
                    *v = base[i] + a1 * d1[i] + a2 * d2[i];
                    i += 1;
                }
            }
            points.push((a1, a2, loss(&probe)?));
        }
    }
    Ok(Landscape {
        dims,
        center: loss(params)?,
        points,
    })
}

/// Fixed source episodes the landscape loss is averaged over.
pub fn landscape_episodes(seed: u64, count: usize, n: usize, k: usize, m: usize) -> Result<Vec<Episode>> {
    (0..count)
        .map(|i| sample_episode(n, k, m, &DomainSpec::source(), &mut rng::stream(seed, &[rng::tag("landscape"), i as u64])))
        .collect()
}
