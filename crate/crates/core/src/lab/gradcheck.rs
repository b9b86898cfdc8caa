use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{gen_sample, LabError, Rules, SynthTaskConfig};
use crate::model::{ModelConfig, ModelError, SlbModel};

/// Absolute error below which a coordinate passes regardless of scale.
pub const ABS_FLOOR: f64 = 1e-8;
/// Relative error a coordinate must stay under.
pub const REL_TOL: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub enum GroupStatus {
    Checked { max_abs: f64, max_rel: f64 },
    /// No path from the group to the loss: analytic and numeric
    /// gradients are both exactly zero.
    StructurallyZero,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupCheck {
    pub name: String,
    pub sampled: usize,
    pub status: GroupStatus,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub groups: Vec<GroupCheck>,
    pub max_rel: f64,
    pub pass: bool,
}

impl GradCheckReport {
    pub fn structurally_zero(&self) -> Vec<&str> {
        self.groups
            .iter()
            .filter(|g| g.status == GroupStatus::StructurallyZero)
            .map(|g| g.name.as_str())
            .collect()
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("group\tsampled\tmax_abs\tmax_rel\tstatus\n");
        for g in &self.groups {
            match g.status {
                GroupStatus::Checked { max_abs, max_rel } => out.push_str(&format!(
                    "{}\t{}\t{max_abs:.3e}\t{max_rel:.3e}\t{}\n",
                    g.name,
                    g.sampled,
                    if g.pass { "ok" } else { "FAIL" }
                )),
                GroupStatus::StructurallyZero => out.push_str(&format!(
                    "{}\t{}\t0\t0\tstructurally zero\n",
                    g.name, g.sampled
                )),
            }
        }
        out
    }
}

/// Relative error used throughout: `|a - b| / max(|a|, |b|)`.
pub fn rel_err(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

/// Central differences against reverse mode on `n_sampled` coordinates of
/// every parameter group, on one synthetic sequence of all modalities.
pub fn grad_check(
    model_cfg: &ModelConfig,
    n_sampled: usize,
    eps: f64,
    seed: u64,
) -> Result<GradCheckReport, LabError> {
    let model = SlbModel::new(model_cfg.clone(), &mut ChaCha8Rng::seed_from_u64(seed))?;
    let task = SynthTaskConfig {
        seed,
        vocab: model_cfg.vocab,
        seconds: 0.32,
        distractor_rate: 0.5,
        lag: 0.08,
        text: true,
        ..SynthTaskConfig::default()
    };
    let rules = Rules::new(&task)?;
    let stream = gen_sample(&task, &rules, 0)?.stream;

    let mut grads = model.params.grad_buffer();
    model.accumulate_grads(&stream, None, 1.0, true, &mut grads)?;
    // the summed (unnormalized) loss, matching the analytic scale
    let loss_at = |m: &SlbModel| -> Result<f64, LabError> {
        let r = m.loss(&stream, None)?;
        Ok(r.total() * r.weight())
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let mut probe = model.clone();
    let mut groups = Vec::new();
    for (gi, p) in model.params.groups().iter().enumerate() {
        let len = p.tensor.len();
        let k = n_sampled.min(len);
        let mut idx = sample(&mut rng, len, k).into_vec();
        idx.sort_unstable();
        let analytic_zero = grads[gi].data().iter().all(|&g| g == 0.0);
        let (mut max_abs, mut max_rel) = (0.0f64, 0.0f64);
        let mut numeric_zero = true;
        let mut pass = true;
        for &i in &idx {
            let orig = p.tensor.data()[i];
            probe.params.tensor_mut(&p.name).map_err(ModelError::from)?.data_mut()[i] = orig + eps;
            let up = loss_at(&probe)?;
            probe.params.tensor_mut(&p.name).map_err(ModelError::from)?.data_mut()[i] = orig - eps;
            let down = loss_at(&probe)?;
            probe.params.tensor_mut(&p.name).map_err(ModelError::from)?.data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let analytic = grads[gi].data()[i];
            numeric_zero &= numeric == 0.0;
            let abs = (analytic - numeric).abs();
            let rel = rel_err(analytic, numeric);
            max_abs = max_abs.max(abs);
            if abs >= ABS_FLOOR {
                max_rel = max_rel.max(rel);
                pass &= rel < REL_TOL;
            }
        }
        let status = if analytic_zero && numeric_zero {
            GroupStatus::StructurallyZero
        } else {
            GroupStatus::Checked { max_abs, max_rel }
        };
        groups.push(GroupCheck {
            name: p.name.clone(),
            sampled: k,
            status,
            pass,
        });
    }
    let max_rel = groups
        .iter()
        .filter_map(|g| match g.status {
            GroupStatus::Checked { max_rel, .. } => Some(max_rel),
            _ => None,
        })
        .fold(0.0, f64::max);
    let pass = groups.iter().all(|g| g.pass);
    Ok(GradCheckReport {
        groups,
        max_rel,
        pass,
    })
}
