//! Finite-difference verification of analytic gradients.
//!
//! Everything here runs in `f64`; central differences with the default
//! step are good to roughly 1e-10, so a 1e-4 relative tolerance cleanly
//! separates correct backward passes from broken ones.

use std::collections::BTreeMap;

use ndarray::ArrayD;

use crate::error::Result;
use crate::nn::{Net, ParamStore};
use crate::tape::Graph;

/// Default finite-difference step.
pub const DEFAULT_FD_EPS: f64 = 1e-4;

/// Relative-error summary of one analytic-vs-numeric comparison.
#[derive(Clone, Debug)]
pub struct GradReport {
    /// Max relative error per parameter tensor.
    pub per_param: BTreeMap<String, f64>,
    /// Max relative error on the input gradient.
    pub input_err: f64,
    /// Max over everything above.
    pub max_err: f64,
}

impl GradReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_err < tol
    }

    /// Parameters whose error is at or above `tol`, worst first.
    pub fn offenders(&self, tol: f64) -> Vec<(String, f64)> {
        let mut out: Vec<(String, f64)> = self
            .per_param
            .iter()
            .filter(|(_, &e)| e >= tol)
            .map(|(k, &e)| (k.clone(), e))
            .collect();
        out.sort_by(|a, b| b.1.total_cmp(&a.1));
        out
    }
}

/// Max over entries of `|a-b| / max(|a|, |b|, 1e-6)`.
pub fn relative_error(a: &ArrayD<f64>, b: &ArrayD<f64>) -> f64 {
    debug_assert_eq!(a.shape(), b.shape());
    a.iter()
        .zip(b.iter())
        .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-6))
        .fold(0.0, f64::max)
}

/// Compare two gradient maps. Keys missing on either side count as zeros.
pub fn compare_grad_maps(
    ad: &BTreeMap<String, ArrayD<f64>>,
    fd: &BTreeMap<String, ArrayD<f64>>,
) -> BTreeMap<String, f64> {
    let mut out = BTreeMap::new();
    for (k, a) in ad {
        let e = match fd.get(k) {
            Some(b) => relative_error(a, b),
            None => relative_error(a, &ArrayD::zeros(a.raw_dim())),
        };
        out.insert(k.clone(), e);
    }
    for (k, b) in fd {
        if !ad.contains_key(k) {
            out.insert(k.clone(), relative_error(&ArrayD::zeros(b.raw_dim()), b));
        }
    }
    out
}

/// Check parameter gradients of an arbitrary scalar objective against
/// central finite differences. `build` must construct the forward graph
/// from scratch on every call and return the scalar loss node; anything
/// expressible on the tape (attention blocks, fusion, full denoiser) can
/// be verified this way.
pub fn grad_check_fn<F>(ps: &ParamStore<f64>, eps: f64, mut build: F) -> Result<GradReport>
where
    F: FnMut(&mut Graph<f64>, &ParamStore<f64>) -> Result<crate::tape::Var>,
{
    let mut g = Graph::new();
    let loss = build(&mut g, ps)?;
    let grads = g.backward(loss)?;
    let ad_params = g.param_grads(&grads);

    let mut eval = |store: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let loss = build(&mut g, store)?;
        Ok(g.scalar(loss))
    };

    let mut fd_params: BTreeMap<String, ArrayD<f64>> = BTreeMap::new();
    let names: Vec<String> = ps.names().cloned().collect();
    for name in &names {
        let base = ps.get(name)?.clone();
        let mut fd = ArrayD::<f64>::zeros(base.raw_dim());
        for flat in 0..base.len() {
            let mut hi = ps.clone();
            let mut lo = ps.clone();
            hi.get_mut(name)?.as_slice_mut().unwrap()[flat] += eps;
            lo.get_mut(name)?.as_slice_mut().unwrap()[flat] -= eps;
            fd.as_slice_mut().unwrap()[flat] = (eval(&hi)? - eval(&lo)?) / (2.0 * eps);
        }
        fd_params.insert(name.clone(), fd);
    }

    let per_param = compare_grad_maps(&ad_params, &fd_params);
    let max_err = per_param.values().cloned().fold(0.0, f64::max);
    Ok(GradReport { per_param, input_err: 0.0, max_err })
}

/// Like [`grad_check_fn`], but with one step of Richardson extrapolation:
/// combining central differences at `eps` and `eps/2` cancels the leading
/// eps^2 truncation term. Deep graphs with normalization layers need this;
/// their loss is nearly scale-invariant to early weights, so plain central
/// differences at any single step size are swamped by either truncation or
/// roundoff. Costs four evaluations per parameter scalar instead of two.
pub fn grad_check_fn_richardson<F>(ps: &ParamStore<f64>, eps: f64, mut build: F) -> Result<GradReport>
where
    F: FnMut(&mut Graph<f64>, &ParamStore<f64>) -> Result<crate::tape::Var>,
{
    let mut g = Graph::new();
    let loss = build(&mut g, ps)?;
    let grads = g.backward(loss)?;
    let ad_params = g.param_grads(&grads);

    let mut eval = |store: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let loss = build(&mut g, store)?;
        Ok(g.scalar(loss))
    };

    let mut fd_params: BTreeMap<String, ArrayD<f64>> = BTreeMap::new();
    let names: Vec<String> = ps.names().cloned().collect();
    for name in &names {
        let base = ps.get(name)?.clone();
        let mut fd = ArrayD::<f64>::zeros(base.raw_dim());
        for flat in 0..base.len() {
            let mut diff = |h: f64| -> Result<f64> {
                let mut hi = ps.clone();
                let mut lo = ps.clone();
                hi.get_mut(name)?.as_slice_mut().unwrap()[flat] += h;
                lo.get_mut(name)?.as_slice_mut().unwrap()[flat] -= h;
                Ok((eval(&hi)? - eval(&lo)?) / (2.0 * h))
            };
            let coarse = diff(eps)?;
            let fine = diff(eps / 2.0)?;
            fd.as_slice_mut().unwrap()[flat] = (4.0 * fine - coarse) / 3.0;
        }
        fd_params.insert(name.clone(), fd);
    }

    let per_param = compare_grad_maps(&ad_params, &fd_params);
    let max_err = per_param.values().cloned().fold(0.0, f64::max);
    Ok(GradReport { per_param, input_err: 0.0, max_err })
}

fn scalar_loss(net: &Net, ps: &ParamStore<f64>, x: &ArrayD<f64>) -> Result<f64> {
    let mut g = Graph::<f64>::new();
    let xv = g.leaf(x.clone());
    let y = net.forward(&mut g, ps, xv)?;
    let t = g.leaf(ArrayD::zeros(g.value(y).raw_dim()));
    let loss = g.mse(y, t)?;
    Ok(g.scalar(loss))
}

/// Check every parameter gradient (and the input gradient) of `net` against
/// central finite differences of the scalar objective `mean(y^2)`.
pub fn grad_check(net: &Net, ps: &ParamStore<f64>, x: &ArrayD<f64>, eps: f64) -> Result<GradReport> {
    // Analytic gradients.
    let mut g = Graph::<f64>::new();
    let xv = g.leaf(x.clone());
    let y = net.forward(&mut g, ps, xv)?;
    let t = g.leaf(ArrayD::zeros(g.value(y).raw_dim()));
    let loss = g.mse(y, t)?;
    let grads = g.backward(loss)?;
    let ad_params = g.param_grads(&grads);
    let ad_dx = grads
        .get(xv)
        .cloned()
        .unwrap_or_else(|| ArrayD::zeros(x.raw_dim()));

    // Numeric gradients, parameter by parameter.
    let mut fd_params: BTreeMap<String, ArrayD<f64>> = BTreeMap::new();
    let names: Vec<String> = ps.names().cloned().collect();
    for name in &names {
        let base = ps.get(name)?.clone();
        let mut fd = ArrayD::<f64>::zeros(base.raw_dim());
        for flat in 0..base.len() {
            let mut hi = ps.clone();
            let mut lo = ps.clone();
            hi.get_mut(name)?.as_slice_mut().unwrap()[flat] += eps;
            lo.get_mut(name)?.as_slice_mut().unwrap()[flat] -= eps;
            fd.as_slice_mut().unwrap()[flat] =
                (scalar_loss(net, &hi, x)? - scalar_loss(net, &lo, x)?) / (2.0 * eps);
        }
        fd_params.insert(name.clone(), fd);
    }

    // Numeric input gradient.
    let mut fd_dx = ArrayD::<f64>::zeros(x.raw_dim());
    for flat in 0..x.len() {
        let mut hi = x.clone();
        let mut lo = x.clone();
        hi.as_slice_mut().unwrap()[flat] += eps;
        lo.as_slice_mut().unwrap()[flat] -= eps;
        fd_dx.as_slice_mut().unwrap()[flat] =
            (scalar_loss(net, ps, &hi)? - scalar_loss(net, ps, &lo)?) / (2.0 * eps);
    }

    let per_param = compare_grad_maps(&ad_params, &fd_params);
    let input_err = relative_error(&ad_dx, &fd_dx);
    let max_err = per_param
        .values()
        .cloned()
        .fold(input_err, f64::max);
    Ok(GradReport { per_param, input_err, max_err })
}

/// Run the engine's canonical gradient checks: fusion, both cross-frame
/// attention variants, the temporal branch, the full small denoiser on a
/// 2-frame 8x8 latent, and the v-prediction training objective. Shared by
/// the `gradcheck` subcommand and the acceptance suite; every entry is
/// expected to pass at a 1e-4 relative tolerance.
pub fn standard_suite() -> Result<Vec<(&'static str, GradReport)>> {
    use crate::attention::Attention;
    use crate::condencoder::TemporalBranch;
    use crate::denoiser::{Conditioning, Denoiser, DenoiserConfig};
    use crate::diffusion::{add_noise, v_target, NoiseSchedule};
    use crate::fusion::Fusion;
    use crate::nn::{randn, Conv2d};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    let mut out = Vec::new();

    {
        let fusion = Fusion::new("f", 4, 4, 2, 2, 2, 2)?;
        let mut ps = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        fusion.cbam_s.init(&mut ps, &mut rng);
        fusion.cbam_t.init(&mut ps, &mut rng);
        fusion.attn.init(&mut ps, &mut rng);
        let f_s = randn::<f64, _>(&mut rng, &[2, 4, 3, 3], 0.8);
        let f_t = randn::<f64, _>(&mut rng, &[2, 4, 3, 3], 0.8);
        let report = grad_check_fn(&ps, DEFAULT_FD_EPS, |g, store| {
            let sv = g.leaf(f_s.clone());
            let tv = g.leaf(f_t.clone());
            let y = fusion.forward(g, store, sv, tv)?;
            let t = g.leaf(ArrayD::zeros(g.value(y).raw_dim()));
            g.mse(y, t)
        })?;
        out.push(("fusion", report));
    }

    {
        let att = Attention::new("a", 8, 2, 4)?;
        let mut ps = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        att.init(&mut ps, &mut rng);
        let x = randn::<f64, _>(&mut rng, &[3, 2, 8], 0.7);
        for (label, temporal) in [("cross-frame spatial", false), ("cross-frame temporal", true)] {
            let report = grad_check_fn(&ps, DEFAULT_FD_EPS, |g, store| {
                let xv = g.leaf(x.clone());
                let y = if temporal {
                    att.cross_frame_temporal(g, store, xv)?
                } else {
                    att.cross_frame_spatial(g, store, xv)?
                };
                let t = g.leaf(ArrayD::zeros(g.value(y).raw_dim()));
                g.mse(y, t)
            })?;
            out.push((label, report));
        }
    }

    {
        let tb = TemporalBranch::new("tb", 2, 3)?;
        let mut ps = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        tb.init(&mut ps, &mut rng);
        let stack = randn::<f64, _>(&mut rng, &[2, 2, 8, 8], 1.0);
        let target = randn::<f64, _>(&mut rng, &[2, 3, 2, 2], 1.0);
        let report = grad_check_fn(&ps, DEFAULT_FD_EPS, |g, store| {
            let s = g.leaf(stack.clone());
            let y = tb.forward(g, store, s)?;
            let t = g.leaf(target.clone());
            g.mse(y, t)
        })?;
        out.push(("temporal branch", report));
    }

    {
        let den = Denoiser::new("den", DenoiserConfig::tiny())?;
        let mut ps = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        den.init(&mut ps, &mut rng);
        let z = randn::<f64, _>(&mut rng, &[2, 2, 8, 8], 1.0);
        let target = randn::<f64, _>(&mut rng, &[2, 2, 8, 8], 1.0);
        let d_s1 = randn::<f64, _>(&mut rng, &[2, 3, 8, 8], 0.5);
        let d_s2 = randn::<f64, _>(&mut rng, &[2, 4, 4, 4], 0.5);
        let d_mid = randn::<f64, _>(&mut rng, &[2, 4, 4, 4], 0.5);
        let ctx = randn::<f64, _>(&mut rng, &[3], 1.0);
        // Normalization layers make the loss nearly scale-invariant to the
        // earliest weights, so this one needs Richardson extrapolation.
        let report = grad_check_fn_richardson(&ps, 2e-5, |g, store| {
            let zv = g.leaf(z.clone());
            let cond = Conditioning {
                s1: g.leaf(d_s1.clone()),
                s2: g.leaf(d_s2.clone()),
                mid: g.leaf(d_mid.clone()),
                context: g.leaf(ctx.clone()),
            };
            let v = den.denoise(g, store, zv, 40, 50, Some(&cond))?;
            let t = g.leaf(target.clone());
            g.mse(v, t)
        })?;
        out.push(("denoiser", report));
    }

    {
        let sched = NoiseSchedule::cosine(50)?;
        let conv = Conv2d::new("c", 2, 2, 3, 1, 1);
        let mut ps = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        conv.init(&mut ps, &mut rng);
        let z0 = randn::<f64, _>(&mut rng, &[2, 2, 6, 6], 0.5);
        let eps = randn::<f64, _>(&mut rng, &[2, 2, 6, 6], 1.0);
        let t = 25;
        let z_t = add_noise(&sched, &z0, &eps, t)?;
        let v = v_target(&sched, &z0, &eps, t)?;
        let report = grad_check_fn(&ps, DEFAULT_FD_EPS, |g, store| {
            let zv = g.leaf(z_t.clone());
            let pred = conv.forward(g, store, zv)?;
            let tv = g.leaf(v.clone());
            g.mse(pred, tv)
        })?;
        out.push(("training objective", report));
    }

    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{randn, LayerSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_conv_net() -> (Net, ParamStore<f64>, ArrayD<f64>) {
        let net = Net::new(vec![
            LayerSpec::Conv2d { name: "c1".into(), cin: 2, cout: 4, k: 3, stride: 1, pad: 1 },
            LayerSpec::Silu,
            LayerSpec::GroupNorm { name: "n1".into(), channels: 4, groups: 2 },
            LayerSpec::Conv2d { name: "c2".into(), cin: 4, cout: 2, k: 3, stride: 2, pad: 1 },
            LayerSpec::Sigmoid,
        ]);
        let mut ps = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        net.init(&mut ps, &mut rng);
        let x = randn::<f64, _>(&mut rng, &[1, 2, 6, 6], 1.0);
        (net, ps, x)
    }

    #[test]
    fn conv_net_gradients_match_finite_differences() {
        let (net, ps, x) = small_conv_net();
        let report = grad_check(&net, &ps, &x, DEFAULT_FD_EPS).unwrap();
        assert!(
            report.passes(1e-4),
            "max rel err {} offenders {:?}",
            report.max_err,
            report.offenders(1e-4)
        );
    }

    #[test]
    fn the_standard_suite_covers_six_checks_and_passes() {
        let suite = standard_suite().unwrap();
        let names: Vec<&str> = suite.iter().map(|(n, _)| *n).collect();
        assert_eq!(
            names,
            [
                "fusion",
                "cross-frame spatial",
                "cross-frame temporal",
                "temporal branch",
                "denoiser",
                "training objective"
            ]
        );
        for (name, report) in &suite {
            assert!(
                report.passes(1e-4),
                "{name}: max rel err {} offenders {:?}",
                report.max_err,
                report.offenders(1e-4)
            );
        }
    }

    #[test]
    fn corrupted_gradient_is_flagged() {
        let (net, ps, x) = small_conv_net();
        let mut g = Graph::<f64>::new();
        let xv = g.leaf(x.clone());
        let y = net.forward(&mut g, &ps, xv).unwrap();
        let t = g.leaf(ArrayD::zeros(g.value(y).raw_dim()));
        let loss = g.mse(y, t).unwrap();
        let grads = g.backward(loss).unwrap();
        let mut ad = g.param_grads(&grads);
        // Deliberately corrupt one tensor.
        let w = ad.get_mut("c1.w").unwrap();
        w.mapv_inplace(|v| v * 1.5 + 0.1);

        let honest = grad_check(&net, &ps, &x, DEFAULT_FD_EPS).unwrap();
        assert!(honest.passes(1e-2));

        // Rebuild the FD side and compare against the corrupted map.
        let mut fd = BTreeMap::new();
        for name in ps.names() {
            let base = ps.get(name).unwrap().clone();
            let mut fd_t = ArrayD::<f64>::zeros(base.raw_dim());
            for flat in 0..base.len() {
                let mut hi = ps.clone();
                let mut lo = ps.clone();
                hi.get_mut(name).unwrap().as_slice_mut().unwrap()[flat] += DEFAULT_FD_EPS;
                lo.get_mut(name).unwrap().as_slice_mut().unwrap()[flat] -= DEFAULT_FD_EPS;
                fd_t.as_slice_mut().unwrap()[flat] = (scalar_loss(&net, &hi, &x).unwrap()
                    - scalar_loss(&net, &lo, &x).unwrap())
                    / (2.0 * DEFAULT_FD_EPS);
            }
            fd.insert(name.clone(), fd_t);
        }
        let per_param = compare_grad_maps(&ad, &fd);
        let worst = per_param.values().cloned().fold(0.0, f64::max);
        assert!(worst >= 1e-2, "corruption must be flagged, got {worst}");
    }
}
