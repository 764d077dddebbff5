//! Central finite-difference checks of the analytic parameter gradients.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::model::{parameter_gradients, LossFn, PiipModel};
use crate::params::ParamId;
use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-5;
pub const FD_FLOOR: f64 = 1e-8;

/// Parameter families the coordinate sampler stratifies over.
pub const FAMILIES: &[&str] =
    &["qkv", "fc", "offset", "attn_weight", "gamma", "tau", "ffn", "proj", "merge_w", "head", "other"];

/// Family of a registered parameter name.
pub fn family(name: &str) -> &'static str {
    if name.starts_with("head") {
        "head"
    } else if name.starts_with("merge.proj") {
        "proj"
    } else if name.starts_with("merge.w") {
        "merge_w"
    } else if name.contains(".attn.qkv.") {
        "qkv"
    } else if name.starts_with("interactions.") {
        let tail = name.rsplit('.').nth(1).unwrap_or("");
        if name.ends_with(".gamma") {
            "gamma"
        } else if name.ends_with(".tau") {
            "tau"
        } else if tail == "fc" {
            "fc"
        } else if tail == "offset" {
            "offset"
        } else if tail == "attn_weight" {
            "attn_weight"
        } else if name.contains(".ffn.") {
            "ffn"
        } else {
            "other"
        }
    } else {
        "other"
    }
}

/// Tolerance the central difference is held to by [`GradCheckReport::passed`]
/// callers; also the threshold above which a kink explanation is tried.
pub const FD_TOL: f64 = 1e-4;

/// At a kink inside the stencil the analytic gradient equals the slope on
/// its own side, so its distances to the forward and backward slopes are
/// lopsided; in a smooth region they are equal up to `O(h^2)`. A failing
/// coordinate counts as kinked when the smaller distance is at most this
/// fraction of the larger.
pub const KINK_ASYMMETRY: f64 = 0.1;

/// Tolerance for a kinked coordinate's analytic gradient against the
/// one-sided slope on its own side of the kink.
pub const KINK_SIDE_TOL: f64 = 1e-2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CoordStatus {
    /// Compared against the central difference.
    Checked,
    /// Analytic and numeric gradients both below [`FD_FLOOR`]: roundoff only.
    BelowFloor,
    /// The loss is not differentiable within `[x - h, x + h]`.
    Kink,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoordCheck {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    /// Central difference.
    pub numeric: f64,
    pub forward: f64,
    pub backward: f64,
    /// Against `numeric`; for kinks, against the nearer one-sided slope.
    pub rel_error: f64,
    pub status: CoordStatus,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Every evaluated coordinate, including excluded ones.
    pub coords: Vec<CoordCheck>,
    /// Worst error over [`CoordStatus::Checked`] coordinates.
    pub max_rel_error: f64,
    /// Worst one-sided error over kinked coordinates.
    pub max_kink_error: f64,
}

impl GradCheckReport {
    fn new(coords: Vec<CoordCheck>) -> Self {
        let worst = |st| coords.iter().filter(|c| c.status == st).map(|c| c.rel_error).fold(0.0, f64::max);
        let (max_rel_error, max_kink_error) = (worst(CoordStatus::Checked), worst(CoordStatus::Kink));
        GradCheckReport { coords, max_rel_error, max_kink_error }
    }

    pub fn count(&self, status: CoordStatus) -> usize {
        self.coords.iter().filter(|c| c.status == status).count()
    }

    /// Families with at least one checked coordinate.
    pub fn families(&self) -> Vec<&'static str> {
        let mut f: Vec<_> =
            self.coords.iter().filter(|c| c.status == CoordStatus::Checked).map(|c| family(&c.param)).collect();
        f.sort();
        f.dedup();
        f
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error <= FD_TOL && self.max_kink_error <= KINK_SIDE_TOL
    }
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FD_FLOOR)
}

fn check_coord(model: &mut PiipModel, image: &Tensor, loss: &LossFn, base: f64, analytic: f64, id: ParamId, i: usize) -> Result<CoordCheck> {
    let orig = model.store.get(id).data()[i];
    model.store.get_mut(id).data_mut()[i] = orig + FD_STEP;
    let up = model.loss(image, loss);
    model.store.get_mut(id).data_mut()[i] = orig - FD_STEP;
    let down = model.loss(image, loss);
    model.store.get_mut(id).data_mut()[i] = orig;
    let (up, down) = (up?, down?);
    let numeric = (up - down) / (2.0 * FD_STEP);
    let forward = (up - base) / FD_STEP;
    let backward = (base - down) / FD_STEP;
    let central = relative_error(analytic, numeric);
    let (df, db) = ((analytic - forward).abs(), (analytic - backward).abs());
    let (status, rel_error) = if analytic.abs().max(numeric.abs()) < FD_FLOOR {
        (CoordStatus::BelowFloor, central)
    } else if central > FD_TOL && df.min(db) <= KINK_ASYMMETRY * df.max(db) {
        (CoordStatus::Kink, relative_error(analytic, forward).min(relative_error(analytic, backward)))
    } else {
        (CoordStatus::Checked, central)
    };
    Ok(CoordCheck { param: model.store.name(id).to_string(), index: i, analytic, numeric, forward, backward, rel_error, status })
}

/// Compares analytic gradients against central differences with step
/// [`FD_STEP`] at the given `(parameter, flat index)` coordinates.
pub fn fd_gradient_check(
    model: &mut PiipModel,
    image: &Tensor,
    loss: &LossFn,
    coords: &[(ParamId, usize)],
) -> Result<GradCheckReport> {
    let (base, grads) = parameter_gradients(model, image, loss)?;
    let out = coords
        .iter()
        .map(|&(id, i)| check_coord(model, image, loss, base, grads.get(id).data()[i], id, i))
        .collect::<Result<Vec<_>>>()?;
    Ok(GradCheckReport::new(out))
}

/// Gradient check over `total` coordinates drawn by [`sample_coords`].
/// Excluded coordinates (roundoff-level or kinked) are replaced by fresh
/// draws from the same family until `total` are checked or the family has
/// no untried coordinates left.
pub fn gradient_check(model: &mut PiipModel, image: &Tensor, loss: &LossFn, total: usize, seed: u64) -> Result<GradCheckReport> {
    let (base, grads) = parameter_gradients(model, image, loss)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut pools: Vec<(&'static str, Vec<(ParamId, usize)>)> = Vec::new();
    for (id, name, t) in model.store.iter() {
        let fam = family(name);
        let pos = match pools.iter().position(|(f, _)| *f == fam) {
            Some(p) => p,
            None => {
                pools.push((fam, Vec::new()));
                pools.len() - 1
            }
        };
        pools[pos].1.extend((0..t.len()).map(|i| (id, i)));
    }
    let mut tried = std::collections::HashSet::new();
    let mut out = Vec::new();
    for (id, i) in sample_coords(model, total, seed) {
        let mut coord = (id, i);
        let fam = family(model.store.name(id));
        let pool = &pools.iter().find(|(f, _)| *f == fam).expect("family present").1;
        loop {
            tried.insert(coord);
            let c = check_coord(model, image, loss, base, grads.get(coord.0).data()[coord.1], coord.0, coord.1)?;
            let done = c.status == CoordStatus::Checked;
            out.push(c);
            if done {
                break;
            }
            let fresh: Vec<_> = pool.iter().filter(|c| !tried.contains(*c)).collect();
            match fresh.choose(&mut rng) {
                Some(&&next) => coord = next,
                None => break,
            }
        }
    }
    Ok(GradCheckReport::new(out))
}

/// Draws `total` coordinates: an equal share from every family present in the
/// model, the remainder uniformly over all parameters.
pub fn sample_coords(model: &PiipModel, total: usize, seed: u64) -> Vec<(ParamId, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_family: Vec<(&str, Vec<(ParamId, usize)>)> = FAMILIES.iter().map(|f| (*f, Vec::new())).collect();
    let mut all = Vec::new();
    for (id, name, t) in model.store.iter() {
        let fam = family(name);
        let slot = by_family.iter_mut().find(|(f, _)| *f == fam).expect("known family");
        for i in 0..t.len() {
            slot.1.push((id, i));
            all.push((id, i));
        }
    }
    let present: Vec<_> = by_family.into_iter().filter(|(_, c)| !c.is_empty()).collect();
    let share = total / (present.len() + 1).max(1);
    let mut picked = Vec::with_capacity(total);
    for (_, coords) in &present {
        let n = share.min(coords.len());
        picked.extend(coords.choose_multiple(&mut rng, n).copied());
    }
    while picked.len() < total && !all.is_empty() {
        picked.push(all[rng.gen_range(0..all.len())]);
    }
    picked
}

/// Moves zero-initialized gates, residual scales and sampling heads away
/// from zero so that every parameter family carries gradient signal.
pub fn perturb_for_gradcheck(model: &mut PiipModel, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<ParamId> = model.store.ids().collect();
    for id in ids {
        let name = model.store.name(id).to_string();
        let scale = match family(&name) {
            "gamma" | "tau" => 0.5,
            "offset" | "attn_weight" => 0.3,
            _ if name.ends_with(".scale") => 0.5,
            _ => continue,
        };
        for v in model.store.get_mut(id).data_mut() {
            *v += rng.gen_range(-scale..scale);
        }
    }
}

/// Inputs and a loss direction for a gradient check of `model`.
pub fn random_probe(model: &PiipModel, seed: u64) -> (Tensor, LossFn) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = model.input_resolution();
    let image = Tensor::new(vec![r, r, 3], (0..r * r * 3).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .expect("shape matches");
    let dir = (0..model.output_len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    (image, LossFn::Dot(dir))
}
