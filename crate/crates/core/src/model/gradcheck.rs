//! End-to-end gradient check of the whole network on a micro configuration.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rpose_tensor::gradcheck::relative_error;
use rpose_tensor::{Graph, Tensor};

use super::config::{ModelConfig, Preset};
use super::network::PoseNet;
use crate::error::Result;
use crate::supervision::{balance_weights, weighted_mse_loss, OcclusionScenario, TargetPack};

/// Largest relative error observed for one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
}

/// 16×16 input, four channels per layer, one recurrent pass.
pub fn micro_config() -> ModelConfig {
    ModelConfig {
        preset: Preset::Custom,
        input_size: 16,
        keypoints: 2,
        parts: 1,
        iterations: 1,
        max_iterations: 4,
        channels: vec![4; 7],
        large_kernel: 5,
        scenario: OcclusionScenario::Include,
        bn_eps: rpose_tensor::norm::DEFAULT_BN_EPS,
        bn_momentum: rpose_tensor::norm::DEFAULT_BN_MOMENTUM,
    }
}

fn random_pack(rng: &mut ChaCha8Rng, channels: usize, keypoints: usize, side: usize) -> Result<TargetPack> {
    let plane = side * side;
    let targets: Vec<f64> = (0..channels * plane)
        .map(|_| if rng.random_bool(0.3) { rng.random_range(0.5..12.0) } else { 0.0 })
        .collect();
    let mask: Vec<bool> = (0..channels * plane).map(|_| rng.random_bool(0.9)).collect();
    let weights = balance_weights(&targets, &mask, channels, plane);
    Ok(TargetPack {
        targets: Tensor::new([channels, side, side], targets)?,
        grad_mask: mask,
        pixel_weight: Tensor::new([channels, side, side], weights)?,
        keypoints,
    })
}

/// Training-mode loss over all heads and the analytic parameter gradients.
pub fn loss_and_grads(model: &PoseNet<f64>, images: &Tensor<f64>, packs: &[TargetPack]) -> Result<(f64, Vec<Tensor<f64>>)> {
    let mut g = Graph::new();
    let x = g.leaf(images.clone(), false);
    let fv = model.forward_graph(&mut g, x, true, None)?;
    let heads: Vec<&Tensor<f64>> = fv.heads.iter().map(|&h| g.value(h)).collect();
    let (report, grads) = weighted_mse_loss(&heads, packs)?;
    g.backward_from(fv.heads.iter().copied().zip(grads).collect())?;
    let param_grads = fv
        .params
        .iter()
        .zip(model.params())
        .map(|(&v, p)| g.take_grad(v).unwrap_or_else(|| Tensor::zeros(p.shape().to_vec())))
        .collect();
    Ok((report.total, param_grads))
}

fn loss_only(model: &PoseNet<f64>, images: &Tensor<f64>, packs: &[TargetPack]) -> Result<f64> {
    let mut g = Graph::new();
    let x = g.leaf(images.clone(), false);
    let fv = model.forward_graph(&mut g, x, true, None)?;
    let heads: Vec<&Tensor<f64>> = fv.heads.iter().map(|&h| g.value(h)).collect();
    Ok(weighted_mse_loss(&heads, packs)?.0.total)
}

/// Compares backpropagated parameter gradients of the full training loss with
/// central differences, checking up to `per_group` coordinates of every
/// parameter tensor.
pub fn end_to_end_gradcheck(seed: u64, per_group: usize) -> Result<Vec<GroupCheck>> {
    let cfg = micro_config();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = PoseNet::<f64>::new(cfg.clone(), seed)?;
    // Move the affine and bias terms off their trivial initial values.
    for (name, p) in model.param_names().into_iter().zip(model.params_mut()) {
        if !name.ends_with(".weight") {
            p.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.2..0.3));
        }
    }
    let n = 2;
    let side = cfg.heatmap_size();
    let images = Tensor::from_fn([n, 3, cfg.input_size, cfg.input_size], |_| rng.random_range(-1.0..1.0));
    let packs = (0..n)
        .map(|_| random_pack(&mut rng, cfg.heads_channels(), cfg.keypoints, side))
        .collect::<Result<Vec<_>>>()?;

    let (_, analytic) = loss_and_grads(&model, &images, &packs)?;
    let h = 1e-6;
    let names = model.param_names();
    let mut out = Vec::with_capacity(names.len());
    for (gi, name) in names.iter().enumerate() {
        let numel = analytic[gi].numel();
        let picks: Vec<usize> = if numel <= per_group {
            (0..numel).collect()
        } else {
            (0..per_group).map(|_| rng.random_range(0..numel)).collect()
        };
        let mut worst: f64 = 0.0;
        for &i in &picks {
            let orig = model.params()[gi].data()[i];
            model.params_mut()[gi].data_mut()[i] = orig + h;
            let plus = loss_only(&model, &images, &packs)?;
            model.params_mut()[gi].data_mut()[i] = orig - h;
            let minus = loss_only(&model, &images, &packs)?;
            model.params_mut()[gi].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            worst = worst.max(relative_error(analytic[gi].data()[i], numeric));
        }
        out.push(GroupCheck {
            name: name.clone(),
            checked: picks.len(),
            max_rel_error: worst,
        });
    }
    Ok(out)
}
