//! Central finite-difference checks of autodiff gradients (64-bit only).

use candle_core::{DType, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{ModelError, Result};
use crate::ops;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub name: String,
    /// Number of entries perturbed.
    pub checked: usize,
    /// `|g_auto - g_fd| / max(|g_auto|, |g_fd|)` over the checked entries.
    pub rel_error: f64,
    pub grad_norm: f64,
}

/// Compares the gradient of scalar `loss()` w.r.t. `var` with central
/// differences on up to `max_entries` evenly spaced entries.
///
/// `var` is restored to its original value afterwards.
pub fn check_var(
    name: &str,
    var: &Var,
    loss: &dyn Fn() -> Result<Tensor>,
    max_entries: usize,
    eps: f64,
) -> Result<GradCheck> {
    if var.dtype() != DType::F64 {
        return Err(ModelError::Config("gradient checks need 64-bit parameters".into()));
    }
    let grads = loss()?.backward()?;
    let auto: Vec<f64> = ops::grad_or_zeros(&grads, var.as_tensor())?.flatten_all()?.to_vec1()?;
    let shape = var.dims().to_vec();
    let base: Vec<f64> = var.as_tensor().flatten_all()?.to_vec1()?;
    let n = base.len();
    let picks: Vec<usize> = if n <= max_entries {
        (0..n).collect()
    } else {
        (0..max_entries).map(|k| k * n / max_entries).collect()
    };
    let eval_at = |i: usize, delta: f64| -> Result<f64> {
        let mut v = base.clone();
        v[i] += delta;
        var.set(&Tensor::from_vec(v, shape.as_slice(), var.device())?)?;
        let out = ops::scalar(&loss()?)?;
        Ok(out)
    };
    let mut diff2 = 0.0;
    let mut auto2 = 0.0;
    let mut fd2 = 0.0;
    for &i in &picks {
        let fd = (eval_at(i, eps)? - eval_at(i, -eps)?) / (2.0 * eps);
        diff2 += (auto[i] - fd).powi(2);
        auto2 += auto[i].powi(2);
        fd2 += fd * fd;
    }
    var.set(&Tensor::from_vec(base, shape.as_slice(), var.device())?)?;
    let scale = auto2.sqrt().max(fd2.sqrt());
    let rel_error = if scale == 0.0 { 0.0 } else { diff2.sqrt() / scale };
    Ok(GradCheck { name: name.to_string(), checked: picks.len(), rel_error, grad_norm: auto2.sqrt() })
}

/// Fixed pseudo-random projection `sum(x * r)` turning any tensor into a scalar.
pub fn random_projection(x: &Tensor, seed: u64) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r: Vec<f64> = (0..x.elem_count()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let r = Tensor::from_vec(r, x.dims(), x.device())?.to_dtype(x.dtype())?;
    Ok((x * r)?.sum_all()?)
}


const SUITE_ENTRIES: usize = 12;
const SUITE_EPS: f64 = 1e-5;

fn normal_var(ps: &mut crate::params::ParamStore, name: &str, shape: &[usize]) -> Result<Var> {
    let t = ps.frozen(name, shape, crate::params::Init::Normal(1.0))?;
    Ok(Var::from_tensor(&t)?)
}

/// Gradient checks of every differentiable stage on toy 64-bit shapes.
pub fn toy_suite() -> Result<Vec<GradCheck>> {
    use crate::backbone::Unet;
    use crate::cipm::Cipm;
    use crate::coarse::{dual_softmax_tensor, CoarseTransformer};
    use crate::config::{BackboneSpec, CipmSpec, PromptMode};
    use crate::params::{Init, ParamStore};
    use crate::supervision::{coarse_loss_batch, expected_positions, fine_loss_l1, fine_loss_l2_tensor};

    let mut out = Vec::new();
    let check = |out: &mut Vec<GradCheck>, name: &str, var: &Var, f: &dyn Fn() -> Result<Tensor>| -> Result<()> {
        out.push(check_var(name, var, f, SUITE_ENTRIES, SUITE_EPS)?);
        Ok(())
    };

    // Backbone features w.r.t. the prompt tokens.
    let spec = BackboneSpec {
        latent_channels: 4,
        channels: [8, 8],
        out_channels: 8,
        prompt_dim: 6,
        time_embed_dim: 8,
        groups: 4,
        ..BackboneSpec::default()
    };
    let mut ps = ParamStore::new(11, DType::F64);
    let unet = Unet::new(&mut ps, &spec)?;
    let z = ps.frozen("input/z", &[1, 4, 4, 4], Init::Normal(1.0))?;
    let prompt = normal_var(&mut ps, "input/prompt", &[1, 3, 6])?;
    check(&mut out, "extract_features/prompt", &prompt, &|| random_projection(&unet.forward(&z, 0, prompt.as_tensor())?, 1))?;

    // Cross-image prompts w.r.t. every module weight.
    let cspec = CipmSpec { encoder_dim: 6, grid: 3, attn_dim: 4, mode: PromptMode::Cross };
    let mut ps = ParamStore::new(12, DType::F64);
    let cipm = Cipm::new(&mut ps, &cspec, 5)?;
    let fa = ps.frozen("input/fa", &[1, 6, 3, 3], Init::Normal(1.0))?;
    let fb = ps.frozen("input/fb", &[1, 6, 3, 3], Init::Normal(1.0))?;
    let f = || -> Result<Tensor> {
        let (pa, pb) = cipm.prompts(&fa, &fb, PromptMode::Cross)?;
        Ok((random_projection(&pa, 2)? + random_projection(&pb, 3)?)?)
    };
    for (name, var) in ps.named_trainable() {
        check(&mut out, &format!("cross_prompt/{name}"), &var, &f)?;
    }

    // Attention transform w.r.t. its inputs and weights.
    let mut ps = ParamStore::new(13, DType::F64);
    let tf = CoarseTransformer::new(&mut ps, 8, 2)?;
    let weights = ps.named_trainable();
    let ca = normal_var(&mut ps, "input/ca", &[1, 8, 4, 4])?;
    let cb = normal_var(&mut ps, "input/cb", &[1, 8, 4, 4])?;
    let f = || -> Result<Tensor> {
        let (a, b) = tf.forward(ca.as_tensor(), cb.as_tensor())?;
        Ok((random_projection(&a, 4)? + random_projection(&b, 5)?)?)
    };
    check(&mut out, "transform_features/ca", &ca, &f)?;
    check(&mut out, "transform_features/cb", &cb, &f)?;
    for (name, var) in weights {
        check(&mut out, &format!("transform_features/{name}"), &var, &f)?;
    }

    // Coarse loss through the dual-softmax w.r.t. the scores.
    let mut ps = ParamStore::new(14, DType::F64);
    let scores = normal_var(&mut ps, "input/scores", &[2, 6, 5])?;
    let pairs = [(0, 0, 1), (0, 3, 4), (1, 2, 2), (1, 5, 0)];
    for gamma in [0.0, 2.0] {
        check(&mut out, &format!("coarse_loss/gamma{gamma}"), &scores, &|| {
            coarse_loss_batch(&dual_softmax_tensor(scores.as_tensor())?, &pairs, gamma)
        })?;
    }

    // Local matching loss w.r.t. both windows' fine features.
    let pa = normal_var(&mut ps, "input/patch_a", &[2, 9, 4])?;
    let pb = normal_var(&mut ps, "input/patch_b", &[2, 9, 4])?;
    let targets = [(0, 4, 3), (1, 0, 8), (1, 4, 4)];
    let f = || -> Result<Tensor> {
        let s = (pa.as_tensor().matmul(&pb.as_tensor().t()?)? * 2.0)?;
        fine_loss_l1(&s, &targets)
    };
    check(&mut out, "fine_loss_l1/patch_a", &pa, &f)?;
    check(&mut out, "fine_loss_l1/patch_b", &pb, &f)?;

    // Subpixel regression loss w.r.t. the query and the 3x3 neighbourhood.
    let qa = normal_var(&mut ps, "input/query", &[3, 4, 1])?;
    let nb = normal_var(&mut ps, "input/neighbours", &[3, 9, 4])?;
    let xs: Vec<f64> = (0..3).flat_map(|m| (0..9).map(move |k| (k % 3) as f64 * 2.0 + m as f64)).collect();
    let ys: Vec<f64> = (0..3).flat_map(|_| (0..9).map(|k| (k / 3) as f64 * 2.0)).collect();
    let xs = Tensor::from_vec(xs, (3, 9), qa.device())?;
    let ys = Tensor::from_vec(ys, (3, 9), qa.device())?;
    let target = Tensor::new(&[[1.2f64, 2.5], [2.0, 0.4], [3.3, 3.9]], qa.device())?;
    let f = || -> Result<Tensor> {
        let logits = (nb.as_tensor().matmul(qa.as_tensor())?.squeeze(2)? * 2.0)?;
        fine_loss_l2_tensor(&expected_positions(&logits, &xs, &ys)?, &target)
    };
    check(&mut out, "fine_loss_l2/query", &qa, &f)?;
    check(&mut out, "fine_loss_l2/neighbours", &nb, &f)?;
    Ok(out)
}
