//! Finite-difference gradient verification.
//!
//! Walks a deterministic sample of trainable parameters, perturbs each one on
//! a cloned network, and compares the central difference of the loss against
//! the analytic gradient left in the grad buffers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::models::Params;
use crate::scalar::Scalar;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub mean_rel_err: f64,
    /// Parameter tensor holding the worst element.
    pub worst: String,
}

fn add_at<T: Scalar, N: Params<T>>(net: &mut N, flat: usize, delta: f64) {
    let mut cursor = 0usize;
    net.visit_step("", &mut |_, mut p, _| {
        let len = p.len();
        if flat >= cursor && flat < cursor + len {
            if let Some(v) = p.iter_mut().nth(flat - cursor) {
                *v = *v + T::from_f64(delta);
            }
        }
        cursor += len;
    });
}

/// Compare analytic gradients against central finite differences on up to
/// `samples` randomly chosen trainable parameters.
///
/// `loss_grad` must zero the grads it touches, run forward/backward, and
/// return the loss; `loss_val` must evaluate the *same* scalar function
/// without needing gradients. Both see freshly cloned networks, so stateful
/// side effects (batchnorm running stats) cannot leak between probes.
pub fn check_gradients<T: Scalar, N: Params<T> + Clone>(
    net: &N,
    loss_grad: &mut dyn FnMut(&mut N) -> Result<f64>,
    loss_val: &mut dyn FnMut(&mut N) -> Result<f64>,
    samples: usize,
    eps: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    let mut work = net.clone();
    work.zero_grads();
    loss_grad(&mut work)?;

    let mut names: Vec<String> = Vec::new();
    let mut starts: Vec<usize> = Vec::new();
    let mut grads: Vec<f64> = Vec::new();
    work.visit_step("", &mut |name, _, g| {
        names.push(name.to_string());
        starts.push(grads.len());
        grads.extend(g.iter().map(|v| v.as_f64()));
    });
    let total = grads.len();
    assert!(total > 0, "network has no trainable parameters");

    let picks: Vec<usize> = if samples >= total {
        (0..total).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rand::seq::index::sample(&mut rng, total, samples).into_vec()
    };

    let mut max_rel = 0.0f64;
    let mut sum_rel = 0.0f64;
    let mut worst = String::new();
    for &flat in &picks {
        let mut plus = net.clone();
        add_at(&mut plus, flat, eps);
        let lp = loss_val(&mut plus)?;
        let mut minus = net.clone();
        add_at(&mut minus, flat, -eps);
        let lm = loss_val(&mut minus)?;
        let fd = (lp - lm) / (2.0 * eps);
        let an = grads[flat];
        let rel = (fd - an).abs() / (fd.abs() + an.abs()).max(1e-10);
        sum_rel += rel;
        if rel > max_rel {
            max_rel = rel;
            let t = starts.partition_point(|&s| s <= flat) - 1;
            worst = format!("{} (fd {fd:.3e}, analytic {an:.3e})", names[t]);
        }
    }
    Ok(GradCheckReport {
        checked: picks.len(),
        max_rel_err: max_rel,
        mean_rel_err: sum_rel / picks.len() as f64,
        worst,
    })
}
