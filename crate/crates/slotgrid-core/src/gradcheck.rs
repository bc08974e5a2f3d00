//! Central finite-difference verification of the reverse-mode gradients.
//!
//! The check freezes the label assignment at the base parameter point (it is
//! detached from differentiation by design) and compares the analytic
//! gradient of every scalar parameter against `(f(p+h) - f(p-h)) / 2h`. A
//! forward pass whose kink margin falls under the threshold (a ReLU, min/max,
//! or atan2 too close to its kink) is resampled with a fresh seed instead of
//! being compared against a one-sided derivative.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::assign::AssignConfig;
use crate::error::{Error, Result};
use crate::model::{DetectorConfig, SlotDetector};
use crate::par;
use crate::tape::Tape;
use crate::train::{assign_scene, build_loss, loss_eval, Scene};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckConfig {
    pub fd_step: f64,
    pub tolerance: f64,
    /// Minimum distance to a kink required of the base forward pass.
    pub kink_margin: f64,
    pub max_resamples: usize,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            fd_step: 1e-5,
            tolerance: 1e-4,
            // A parameter step of ~1e-5 moves any single pre-activation by
            // far less than this, so entries at least this far from a kink
            // cannot flip sides during a probe. Demanding more (say 1e-3)
            // over the thousands of ReLU entries in a whole-model forward
            // would make resampling hopeless.
            kink_margin: 1e-4,
            max_resamples: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub scenes_checked: usize,
    pub params_checked: usize,
    pub entries_checked: usize,
    pub resamples: usize,
    pub max_rel_err: f64,
    pub worst_param: String,
}

impl GradCheckReport {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_rel_err < tolerance
    }
}

const REL_FLOOR: f64 = 1e-6;

fn rel_err(fd: f64, analytic: f64) -> f64 {
    crate::math::abs(fd - analytic) / crate::math::abs(fd).max(crate::math::abs(analytic)).max(REL_FLOOR)
}

/// Checks every scalar parameter of a freshly initialized model against
/// central differences on one scene. Returns `None` if the scene cannot be
/// used (kink margin too small), in which case the caller resamples.
fn check_one(
    cfg: &DetectorConfig,
    scene: &Scene,
    assign_cfg: &AssignConfig,
    gc: &GradCheckConfig,
    param_seed: u64,
) -> Result<Option<(f64, String, usize)>> {
    let model = SlotDetector::new(cfg.clone(), param_seed)?;

    // Base forward: analytic gradients plus the frozen assignment.
    let mut tape = Tape::new();
    let (fwd, assignment) = assign_scene(&model, &mut tape, scene, assign_cfg)?;
    let nodes = build_loss(&mut tape, &fwd, &assignment, &scene.boxes, assign_cfg.lambda);
    if tape.min_kink_margin() < gc.kink_margin {
        return Ok(None);
    }
    let grads = tape.backward(nodes.total)?;

    let mut max_err = 0.0f64;
    let mut worst = String::new();
    let mut entries = 0usize;
    for slot in 0..model.params.len() {
        let shape = model.params.tensor(slot).shape();
        let analytic = grads.get_or_zeros(fwd.param_nodes[slot], shape);
        let n_entries = shape.0 * shape.1;
        // Each probe re-evaluates the frozen-assignment loss twice; probes
        // are independent, so they parallelize cleanly.
        let errs: Vec<f64> = par::map_indexed(n_entries, 4, |e| {
            let (i, j) = (e / shape.1, e % shape.1);
            let base = model.params.tensor(slot).at(i, j);
            let probe = |v: f64| -> f64 {
                let mut m = SlotDetector::new(cfg.clone(), param_seed).expect("model rebuild");
                m.params = model.params.clone();
                m.params.tensor_mut(slot).set(i, j, v);
                let (losses, _) = loss_eval(&m, scene, assign_cfg, Some(&assignment))
                    .expect("fd probe forward");
                losses.total
            };
            let fd_at = |h: f64| (probe(base + h) - probe(base - h)) / (2.0 * h);
            let mut err = rel_err(fd_at(gc.fd_step), analytic.at(i, j));
            // Step refinement: a suspect entry is re-probed with a smaller
            // step, which shrinks both truncation error and the radius in
            // which a marginal kink could flip.
            if err >= gc.tolerance {
                err = err.min(rel_err(fd_at(gc.fd_step * 0.1), analytic.at(i, j)));
            }
            err
        });
        entries += n_entries;
        for (e, &err) in errs.iter().enumerate() {
            if err > max_err {
                max_err = err;
                let (i, j) = (e / shape.1, e % shape.1);
                worst = format!("{}[{},{}]", model.params.name(slot), i, j);
            }
        }
    }
    Ok(Some((max_err, worst, entries)))
}

/// Runs the full-model gradient check over a set of scenes.
///
/// Parameters are re-initialized per scene (seed = `base_seed + scene index`)
/// so the check covers diverse operating points; scenes whose forward pass
/// sits too close to a kink are retried with shifted seeds.
pub fn check_model_gradients(
    cfg: &DetectorConfig,
    scenes: &[Scene],
    assign_cfg: &AssignConfig,
    gc: &GradCheckConfig,
    base_seed: u64,
) -> Result<GradCheckReport> {
    if scenes.is_empty() {
        return Err(Error::EmptyInput("gradient check needs scenes"));
    }
    let probe_model = SlotDetector::new(cfg.clone(), base_seed)?;
    let params_checked = probe_model.params.len();
    let mut report = GradCheckReport {
        scenes_checked: 0,
        params_checked,
        entries_checked: 0,
        resamples: 0,
        max_rel_err: 0.0,
        worst_param: String::new(),
    };
    for (idx, scene) in scenes.iter().enumerate() {
        let mut seed = base_seed + idx as u64;
        let mut outcome = None;
        for _ in 0..gc.max_resamples {
            match check_one(cfg, scene, assign_cfg, gc, seed)? {
                Some(r) => {
                    outcome = Some(r);
                    break;
                }
                None => {
                    report.resamples += 1;
                    seed += 7919; // take another parameter draw
                }
            }
        }
        let (max_err, worst, entries) = outcome.ok_or_else(|| {
            Error::Invalid(format!(
                "scene {idx}: no kink-free operating point found after {} resamples",
                gc.max_resamples
            ))
        })?;
        report.scenes_checked += 1;
        report.entries_checked += entries;
        if max_err > report.max_rel_err {
            report.max_rel_err = max_err;
            report.worst_param = worst;
        }
    }
    Ok(report)
}
