use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, LayerKind, ResizeTarget, Tensor4};
use crate::{Error, Result};

/// Compare analytic gradients of one layer against central differences.
///
/// The layer is wrapped as `loss = sum(R * layer(inputs))` for a fixed random
/// projection `R`. Returns the largest relative error over every parameter
/// and input element, where relative error is
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check(kind: &LayerKind, inputs: &[&Tensor4], epsilon: f64) -> Result<f64> {
    if !(epsilon > 0.0 && epsilon <= 1e-2) {
        return Err(Error::Config(format!("epsilon must lie in (0, 1e-2], got {epsilon}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x6772_6164);
    let mut g = Graph::new();
    let ids: Vec<_> = inputs
        .iter()
        .enumerate()
        .map(|(i, t)| g.input(&format!("in{i}"), t.shape().c))
        .collect::<Result<_>>()?;
    let layer = match kind {
        LayerKind::Conv3x3 { out_channels, .. } => g.conv3x3("layer", ids[0], *out_channels, &mut rng)?,
        LayerKind::Deconv2x2 { out_channels, .. } => g.deconv2x2("layer", ids[0], *out_channels, &mut rng)?,
        LayerKind::Relu => g.relu("layer", ids[0])?,
        LayerKind::Maxpool2x2 => g.maxpool2x2("layer", ids[0])?,
        LayerKind::AddSkip => g.add("layer", ids[0], ids[1])?,
        LayerKind::ConcatChannels => g.concat("layer", &ids)?,
        LayerKind::ResizeBilinear {
            target: ResizeTarget::Fixed { h, w },
        } => g.resize_fixed("layer", ids[0], *h, *w)?,
        LayerKind::ResizeBilinear {
            target: ResizeTarget::LikeSecond,
        } => g.resize_like("layer", ids[0], ids[1])?,
        LayerKind::Detach => g.detach("layer", ids[0])?,
        LayerKind::Sum => g.sum("layer", ids[0])?,
        LayerKind::Mean => g.mean("layer", ids[0])?,
        LayerKind::Input { .. } => return Err(Error::Config("cannot gradient-check an input node".into())),
    };
    // Nonzero biases so their gradients are exercised too.
    for p in g.params_mut() {
        p.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.5..0.5));
    }

    let named: Vec<(String, Tensor4)> = inputs
        .iter()
        .enumerate()
        .map(|(i, t)| (format!("in{i}"), (*t).clone()))
        .collect();
    let acts = forward_named(&g, &named)?;
    let out_shape = acts.get(layer).shape();
    let proj = Tensor4::from_fn(out_shape, |_, _, _, _| rng.random_range(-1.0..1.0));
    let grads = g.backward_seeded(&acts, &[(layer, proj.clone())])?;

    let loss = |g: &Graph, named: &[(String, Tensor4)]| -> Result<f64> {
        let acts = forward_named(g, named)?;
        Ok(acts.get(layer).data().iter().zip(proj.data()).map(|(a, b)| a * b).sum())
    };

    let mut worst: f64 = 0.0;
    for pid in 0..g.params().len() {
        for i in 0..g.params()[pid].shape().len() {
            let analytic = grads.param(pid).data()[i];
            let mut gp = g.clone();
            gp.params_mut()[pid].data_mut()[i] += epsilon;
            let plus = loss(&gp, &named)?;
            gp.params_mut()[pid].data_mut()[i] -= 2.0 * epsilon;
            let minus = loss(&gp, &named)?;
            worst = worst.max(rel_err(analytic, (plus - minus) / (2.0 * epsilon)));
        }
    }
    for (k, &id) in ids.iter().enumerate() {
        let zero = Tensor4::zeros(inputs[k].shape());
        let analytic_t = grads.node(id).unwrap_or(&zero);
        for i in 0..inputs[k].shape().len() {
            let analytic = analytic_t.data()[i];
            let mut np = named.clone();
            np[k].1.data_mut()[i] += epsilon;
            let plus = loss(&g, &np)?;
            np[k].1.data_mut()[i] -= 2.0 * epsilon;
            let minus = loss(&g, &np)?;
            worst = worst.max(rel_err(analytic, (plus - minus) / (2.0 * epsilon)));
        }
    }
    Ok(worst)
}

fn forward_named(g: &Graph, named: &[(String, Tensor4)]) -> Result<super::Activations> {
    let refs: Vec<(&str, &Tensor4)> = named.iter().map(|(n, t)| (n.as_str(), t)).collect();
    g.forward(&refs)
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}
